"""ecgfuse: multi-lead ECG spectrogram fusion pipeline.

Submodules follow the pipeline stages: ingest (record parsing/validation),
dsp (filtering, windowing, spectrograms), encoder (deep-feature backends),
fusion (data/feature/decision-level lead fusion), model (dense/LSTM heads
with analytic gradients), evaluation (cross-validation and metrics),
cli (the `ecgfuse` command).
"""

__version__ = "0.1.0"
