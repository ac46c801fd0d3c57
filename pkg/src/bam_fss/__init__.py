"""Few-shot segmentation where a Gram-gated ensemble fuses a base learner with a meta learner."""

__version__ = "0.1.0"
