"""ibkit: channel-covariance gated adapter, IB clustering oracle,
deterministic corruption generators and a desk-scale robustness harness."""

__version__ = "0.1.0"
