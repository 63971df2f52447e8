"""Streaming KV-cache management with deep attention sinks and importance-aware compression."""

from .attention import (AttentionProfile, attend, attention_weights, frame_attention_profile,
                        retained_mass)
from .cache import (CachePolicyConfig, HeadMode, KVCache, LayerCache, Partition, Policy,
                    QueryMode, ScoreMode, SinkAlignment, TokenRecord)
from .errors import CacheError, ConfigError, TriggerError
from .policy import (CompressionReport, ImportanceVector, baseline_step, compute_delta_sink,
                     deep_sink_realign, importance_scores, participative_compress, policy_step,
                     top_c_select, unify_topc_rope)
from .rope import RopeFrequencies, TokenPosition, apply_rope, build_frequencies, rotate_temporal
from .simulator import (Heatmap, RolloutTrace, StreamModel, compare_policies, generate_chunk,
                        rollout, selection_heatmap)

__version__ = "0.1.0"

__all__ = [
    "AttentionProfile", "attend", "attention_weights", "frame_attention_profile", "retained_mass",
    "CachePolicyConfig", "HeadMode", "KVCache", "LayerCache", "Partition", "Policy", "QueryMode",
    "ScoreMode", "SinkAlignment", "TokenRecord",
    "CacheError", "ConfigError", "TriggerError",
    "CompressionReport", "ImportanceVector", "baseline_step", "compute_delta_sink",
    "deep_sink_realign", "importance_scores", "participative_compress", "policy_step",
    "top_c_select", "unify_topc_rope",
    "RopeFrequencies", "TokenPosition", "apply_rope", "build_frequencies", "rotate_temporal",
    "Heatmap", "RolloutTrace", "StreamModel", "compare_policies", "generate_chunk", "rollout",
    "selection_heatmap",
]
