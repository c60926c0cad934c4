"""Experiment plumbing: config files, the CLI and the gradient-quality study."""

from .config import DEFAULTS, load_config, parse_config_text
from .gradquality import GradQualityConfig, StudyResult, grad_quality_study

__all__ = ["DEFAULTS", "GradQualityConfig", "StudyResult", "grad_quality_study", "load_config", "parse_config_text"]
