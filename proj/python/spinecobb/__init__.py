"""Cobb angle estimation from spine radiographs: segmenter, regressor and the
five-stage schedule that trains them against each other."""

import json

from ._spinecobb import (
    Model,
    SpinecobbError,
    ar_loss,
    cam_overlay,
    cobb_from_landmarks,
    config_hash,
    error_overlay,
    extract_cam,
    normalize_angles,
    roie_fuse,
    run_cli,
    seg_loss,
    seg_metrics,
    smape_loss,
    smape_percent,
)
from ._spinecobb import generate_synthetic as _generate_synthetic


def generate_synthetic(spec=None, seed=0):
    """One synthetic radiograph as a dict of image, mask, landmarks and the
    generator's analytic (PT, MT, TL) angles in degrees."""
    return _generate_synthetic(json.dumps(spec or {}), seed)


__all__ = [
    "Model",
    "SpinecobbError",
    "ar_loss",
    "cam_overlay",
    "cobb_from_landmarks",
    "config_hash",
    "error_overlay",
    "extract_cam",
    "generate_synthetic",
    "normalize_angles",
    "roie_fuse",
    "run_cli",
    "seg_loss",
    "seg_metrics",
    "smape_loss",
    "smape_percent",
]
