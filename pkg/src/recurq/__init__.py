"""Recurrent vector quantization with a shared scaled codebook,
prefix-sliceable binary codes, and ADC-based nearest-neighbor search."""

from .core import (
    CodeSequence,
    DomainError,
    FeatureMatrix,
    QuantTrace,
    RqModel,
    SoftAssignment,
    encode,
    encode_batch,
    hard_quantize,
    pack_codes,
    packed_size,
    reconstruct_hard,
    reconstruct_soft,
    slice_prefix,
    soft_quantize,
    unpack_codes,
)
from .index import (
    AdcTable,
    EncodedDatabase,
    EvalReport,
    build_adc_table,
    encode_database,
    evaluate,
    search,
)
from .io import FileFormatError, load_codes, load_model, read_fvecs, read_labels, save_codes, save_model, write_fvecs, write_labels
from .synth import synth_dataset
from .train import (
    DistortionReport,
    LabelEmbeddings,
    TrainConfig,
    TripletBatch,
    adam_step,
    adaptive_margin_loss,
    distortion_losses,
    grad_hard_distortion,
    grad_soft_distortion,
    kmeans_init,
    train,
    triplet_loss,
)

__all__ = [
    "AdcTable",
    "CodeSequence",
    "DistortionReport",
    "DomainError",
    "EncodedDatabase",
    "EvalReport",
    "FeatureMatrix",
    "FileFormatError",
    "LabelEmbeddings",
    "QuantTrace",
    "RqModel",
    "SoftAssignment",
    "TrainConfig",
    "TripletBatch",
    "adam_step",
    "adaptive_margin_loss",
    "build_adc_table",
    "distortion_losses",
    "encode",
    "encode_batch",
    "encode_database",
    "evaluate",
    "grad_hard_distortion",
    "grad_soft_distortion",
    "hard_quantize",
    "kmeans_init",
    "load_codes",
    "load_model",
    "pack_codes",
    "packed_size",
    "read_fvecs",
    "read_labels",
    "reconstruct_hard",
    "reconstruct_soft",
    "save_codes",
    "save_model",
    "search",
    "slice_prefix",
    "soft_quantize",
    "synth_dataset",
    "train",
    "triplet_loss",
    "unpack_codes",
    "write_fvecs",
    "write_labels",
]
