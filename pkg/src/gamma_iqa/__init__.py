"""Mixture-of-assessment-experts image quality model with scene-dependent prompts,
built on a small numpy autodiff core and trained on a synthetic multi-scene suite."""

__version__ = "0.1.0"
