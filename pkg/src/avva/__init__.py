"""AVVA: audio-video vector alignment at desk scale.

LLM-scored curation of clip corpora, a text-free dual-encoder alignment head
trained contrastively over frozen features, and a repeated-subset retrieval
evaluation protocol. See the `avva` CLI for the stage-by-stage pipeline.
"""

__version__ = "0.1.0"

from .encoders import FeatureSequence, LatentWorld, synthetic_providers
from .ingest import ClipSegment, CorpusManifest, MediaRef, segment_media
from .model import EmbeddingPair, default_config, info_nce, init_params
from .mre import AlignmentScores, CaptionPair, MetricName, curate, parse_scores

__all__ = [
    "__version__",
    "AlignmentScores",
    "CaptionPair",
    "ClipSegment",
    "CorpusManifest",
    "EmbeddingPair",
    "FeatureSequence",
    "LatentWorld",
    "MediaRef",
    "MetricName",
    "curate",
    "default_config",
    "info_nce",
    "init_params",
    "parse_scores",
    "segment_media",
    "synthetic_providers",
]
