"""Sliding-window neural speaker diarization, trainable at desk scale.

Local segmentation networks (BiLSTM or bidirectional Mamba) label fixed
windows with anonymous speaker slots; speaker embeddings clustered across
windows unify the identities; DER scoring and oracle-stitched evaluation
close the loop.
"""

from .core import (
    Annotation,
    FrameMatrix,
    Segment,
    Uem,
    annotation_to_frames,
    frames_to_annotation,
    read_rttm,
    read_uem,
    write_rttm,
    write_uem,
)
from .errors import DiaristError, FormatError, NumericalError, ParseError
from .estimator import SpeakerDiarizer
from .labels import (
    CapacityStats,
    PitResult,
    PowersetTable,
    multilabel_to_powerset,
    pit_bce,
    pit_powerset_ce,
    powerset_table,
    powerset_to_multilabel,
    speaker_capacity_stats,
)
from .metrics import DERBreakdown, der, der_corpus, optimal_mapping
from .pipeline import (
    Embedding,
    LocalWindowOutput,
    MeanPoolEmbedder,
    PipelineParams,
    ahc_cluster,
    binarize,
    extract_embeddings,
    oracle_stitch,
    run_pipeline,
    slide_windows,
    tile_windows,
)
from .segmentation import ModelConfig, SegmentationModel, build_model, load_model, save_model
from .seqnet import (
    BiLstm,
    ExternalBiMamba,
    LstmConfig,
    MambaBlock,
    MambaBlockConfig,
    parameter_gradients,
    selective_scan,
)
from .synth import SynthSpec, gen_conversation, load_features, logmel, save_features
from .training import TrainConfig, TrainHistory, adapt, lr_at, make_windows, train_segmentation
from .tuning import SearchSpace, Trial, tune

__version__ = "0.1.0"

__all__ = [
    "Annotation", "FrameMatrix", "Segment", "Uem",
    "annotation_to_frames", "frames_to_annotation",
    "read_rttm", "write_rttm", "read_uem", "write_uem",
    "DiaristError", "ParseError", "FormatError", "NumericalError",
    "SpeakerDiarizer",
    "PowersetTable", "powerset_table", "multilabel_to_powerset", "powerset_to_multilabel",
    "PitResult", "pit_bce", "pit_powerset_ce", "CapacityStats", "speaker_capacity_stats",
    "DERBreakdown", "der", "der_corpus", "optimal_mapping",
    "PipelineParams", "LocalWindowOutput", "Embedding", "MeanPoolEmbedder",
    "slide_windows", "tile_windows", "binarize", "extract_embeddings",
    "ahc_cluster", "run_pipeline", "oracle_stitch",
    "ModelConfig", "SegmentationModel", "build_model", "save_model", "load_model",
    "selective_scan", "MambaBlock", "MambaBlockConfig", "ExternalBiMamba",
    "BiLstm", "LstmConfig", "parameter_gradients",
    "SynthSpec", "gen_conversation", "logmel", "save_features", "load_features",
    "TrainConfig", "TrainHistory", "lr_at", "train_segmentation", "adapt", "make_windows",
    "SearchSpace", "Trial", "tune",
    "__version__",
]
