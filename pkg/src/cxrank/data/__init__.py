"""Dataset construction: manifests, the binary feature store, and the
synthetic generator."""

from .manifest import (
    DatasetManifest,
    ManifestCounts,
    ManifestFormatError,
    build_dataset,
    read_manifest,
    split_dataset,
    write_manifest,
)
from .store import (
    FeatureStore,
    StoreChecksumError,
    StoreDims,
    StoreDimensionError,
    StoreFormatError,
    StoreMagicError,
    StoreTruncationError,
    StoreVersionError,
    read_feature_store,
    write_feature_store,
)
from .synth import (
    GeneratorTruth,
    SyntheticSpec,
    fit_truncated_geometric,
    generate_synthetic,
    read_truth,
    write_truth,
)

__all__ = [
    "DatasetManifest",
    "ManifestCounts",
    "ManifestFormatError",
    "build_dataset",
    "read_manifest",
    "split_dataset",
    "write_manifest",
    "FeatureStore",
    "StoreDims",
    "StoreFormatError",
    "StoreMagicError",
    "StoreVersionError",
    "StoreChecksumError",
    "StoreTruncationError",
    "StoreDimensionError",
    "read_feature_store",
    "write_feature_store",
    "GeneratorTruth",
    "SyntheticSpec",
    "fit_truncated_geometric",
    "generate_synthetic",
    "read_truth",
    "write_truth",
]
