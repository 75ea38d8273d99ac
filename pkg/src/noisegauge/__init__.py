"""noisegauge: meta-learned instance-level noise valuation for diffusion training."""

__version__ = "0.1.0"
