"""Long-term player engagement modelling from gamepad telemetry and frame
features: corpus I/O, window preprocessing, dense classifiers with sinusoidal
time conditioning, and a leave-2-participants-out evaluation harness."""

__version__ = "0.1.0"
