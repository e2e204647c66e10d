"""Whole-slide acquisition time under a focus-map autofocus policy.

Each focus point runs a coarse then a fine axial search; every step costs a
fixed dwell.  A scan spends ``focus_points * point_time`` on autofocus plus a
fixed capture cost (exposures and stage motion) per field of view.

The default capture cost, 4.99 s per field of view, is back-solved from a
208-FOV slide whose fine-mode scan takes 27.1 min with 9.8 min of it
spent on autofocus: (27.1 - 9.8) * 60 / 208.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

CAPTURE_TIME_PER_FOV = (27.1 - 9.8) * 60.0 / 208.0


@dataclass(frozen=True)
class FocusSearchProfile:
    coarse_steps: int
    fine_steps: int
    per_step_dwell: float
    coarse_range_um: float = 50.0
    fine_range_um: float = 20.0
    precision_um: float = float("nan")
    focus_fraction: float = 0.085

    def __post_init__(self):
        if self.coarse_steps < 2 or self.fine_steps < 2:
            raise ValueError("a focus search needs at least two steps per stage")
        if self.per_step_dwell < 0:
            raise ValueError("per_step_dwell must be non-negative")

    @property
    def steps(self):
        return self.coarse_steps + self.fine_steps


FINE = FocusSearchProfile(23, 29, 33.0 / 52.0, precision_um=0.35, focus_fraction=0.085)
COARSE = FocusSearchProfile(9, 13, 15.0 / 22.0, precision_um=0.83, focus_fraction=0.021)
PROFILES = {"fine": FINE, "coarse": COARSE}


@dataclass(frozen=True)
class ScanPlan:
    """A slide of ``n_fovs`` fields scanned with one focus-search profile.

    ``integer_points=False`` (the default) uses the expected number of focus
    points ``n_fovs * focus_fraction`` so that per-slide averages are not
    distorted by rounding on small slides; ``True`` rounds to a whole count
    of at least one.
    """

    n_fovs: int
    focus_fraction: float
    profile: FocusSearchProfile
    capture_time_per_fov: float = CAPTURE_TIME_PER_FOV
    integer_points: bool = False

    def __post_init__(self):
        if self.n_fovs < 1:
            raise ValueError("n_fovs must be >= 1")
        if not 0.0 < self.focus_fraction <= 1.0:
            raise ValueError("focus_fraction must lie in (0, 1]")
        if self.capture_time_per_fov < 0:
            raise ValueError("capture_time_per_fov must be non-negative")

    @property
    def n_focus_points(self):
        expected = self.n_fovs * self.focus_fraction
        if self.integer_points:
            return max(1, round(expected))
        return expected

    @classmethod
    def for_mode(cls, mode, n_fovs, **kw):
        profile = PROFILES[mode]
        return cls(n_fovs, profile.focus_fraction, profile, **kw)


@dataclass(frozen=True)
class ScanReport:
    n_fovs: int
    focus_points: float
    autofocus_time: float
    capture_time: float
    total_time: float


def autofocus_point_time(profile):
    """Seconds spent on one focus point: all search steps times the dwell."""
    return profile.steps * profile.per_step_dwell


def plan_scan(plan):
    points = plan.n_focus_points
    af = points * autofocus_point_time(plan.profile)
    cap = plan.n_fovs * plan.capture_time_per_fov
    return ScanReport(plan.n_fovs, points, af, cap, af + cap)


def compare_plans(fine, coarse):
    """Percentage decrease from ``fine`` to ``coarse`` in autofocus and total time."""
    if fine.n_fovs != coarse.n_fovs:
        raise ValueError("plans must cover the same number of fields of view")
    if fine.autofocus_time == 0 or fine.total_time == 0:
        raise ZeroDivisionError("reference plan has zero duration")
    return {
        "autofocus_pct": 100.0 * (1.0 - coarse.autofocus_time / fine.autofocus_time),
        "total_pct": 100.0 * (1.0 - coarse.total_time / fine.total_time),
    }


SCAN_COLUMNS = ("mode", "n_fovs", "focus_points", "autofocus_s", "capture_s", "total_s")


def scan_csv(reports):
    """CSV text for ``{mode: ScanReport}``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCAN_COLUMNS)
    for mode, r in reports.items():
        w.writerow([mode, r.n_fovs, f"{r.focus_points:.3f}", f"{r.autofocus_time:.2f}",
                    f"{r.capture_time:.2f}", f"{r.total_time:.2f}"])
    return buf.getvalue()
