"""Dataset -> grid -> (optional) smoothing -> 4-channel block."""

from __future__ import annotations

from dataclasses import dataclass

from .features import ChannelBlock, FeatureParams, build_channels
from .ingest import EventKind, GriddedSeries, PatientDataset, align_to_grid
from .kalman import DEFAULT_Q_SCALE, DEFAULT_R, SmoothedSeries, smooth_cgm


@dataclass
class Prepared:
    gridded: dict[EventKind, GriddedSeries]
    smoothed: SmoothedSeries
    block: ChannelBlock

    @property
    def raw_glucose(self) -> GriddedSeries:
        return self.gridded[EventKind.CGM]


def prepare(
    ds: PatientDataset,
    glucose_source: str = "raw",
    q_scale: float = DEFAULT_Q_SCALE,
    r: float = DEFAULT_R,
    features: FeatureParams = FeatureParams(),
) -> Prepared:
    """Grid the dataset and build the model input block.

    The smoothed CGM is always computed so either glucose reference is
    available downstream.
    """
    gridded = align_to_grid(ds)
    smoothed = smooth_cgm(gridded[EventKind.CGM], q_scale, r)
    block = build_channels(
        gridded, glucose_source, smoothed if glucose_source == "smoothed" else None, features
    )
    return Prepared(gridded, smoothed, block)
