from vismae.data.preprocess import (
    EncodingManifest,
    PreparedData,
    PreprocessStats,
    SplitIndices,
    apply_normalizer,
    compute_class_weights,
    compute_total_vis,
    decode_static,
    encode_static,
    fit_imputer,
    fit_normalizer,
    impute,
    prepare_dataset,
    stratified_split,
    vis_matrix,
)
from vismae.data.schema import AGENTS, SCORES, PatientRecord, read_cohort, write_cohort
from vismae.data.synthetic import generate_synthetic_cohort

__all__ = [
    "AGENTS",
    "SCORES",
    "EncodingManifest",
    "PatientRecord",
    "PreparedData",
    "PreprocessStats",
    "SplitIndices",
    "apply_normalizer",
    "compute_class_weights",
    "compute_total_vis",
    "decode_static",
    "encode_static",
    "fit_imputer",
    "fit_normalizer",
    "generate_synthetic_cohort",
    "impute",
    "prepare_dataset",
    "read_cohort",
    "stratified_split",
    "vis_matrix",
    "write_cohort",
]
