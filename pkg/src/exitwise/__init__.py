"""Early-exit inference engine for INT8-quantized ViT encoders.

Pipeline: quantization-noise profiling of a dual-path (FP32/INT8) encoder,
per-layer exit heads over a spatial patch-token aggregate, a learned
multi-feature exit gate, layer-adaptive thresholds with pathological-layer
pruning, FLOPs/accuracy sweeps, and rescue-effect analysis.
"""

__version__ = "0.1.0"
