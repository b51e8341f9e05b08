"""Tensor container I/O, preprocessing transforms and synthetic datasets."""

from .container import (
    ContainerError,
    decode_array,
    decode_checkpoint,
    encode_array,
    encode_checkpoint,
    load_array,
    load_checkpoint,
    save_array,
    save_checkpoint,
)
from .synth import DataError, Dataset, SynthSpec, load_dataset, read_manifest, synth_generate
from .transforms import center_crop, clip_rescale, hist_equalize, instance_norm_nonzero, random_flip_crop
