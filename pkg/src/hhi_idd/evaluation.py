"""MPJPE reports, link-length statistics and the CSV formats they are written in."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import AGENTS, InteractionWindow
from .errors import InputError, ShapeError
from .kinematics import link_lengths, pelvis_align

# column header (ms) -> 1-based future frame at 24 fps
HORIZONS_MS = (85, 330, 580, 750, 1000)


def horizon_frames(fps: int = 24, fut_len: int = 24) -> dict[int, int]:
    """Horizon in ms -> 1-based frame index; horizons past ``fut_len`` are dropped."""
    out = {}
    for ms in HORIZONS_MS:
        frame = max(1, round(ms * fps / 1000))
        if frame <= fut_len:
            out[ms] = frame
    return out


def mpjpe(pred, gt, pelvis_index: int = 0, include_pelvis: bool = False) -> np.ndarray:
    """Per-frame mean joint distance after moving both poses' pelvis to the origin.

    Inputs are ``[..., J, 3]``; the result drops the last two axes.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    d = np.linalg.norm(pelvis_align(pred, pelvis_index) - pelvis_align(gt, pelvis_index), axis=-1)
    if not include_pelvis:
        d = np.delete(d, pelvis_index, axis=-1)
    return d.mean(axis=-1)


def _ordered_mean(values: np.ndarray) -> float:
    # fsum is exactly rounded, so the result does not depend on window order
    return math.fsum(values.ravel().tolist()) / values.size


@dataclass
class HorizonReport:
    agent: str
    horizons: dict[int, float]  # ms -> mm
    average: float
    n_windows: int
    per_frame: np.ndarray = field(repr=False, default=None)
    label: str = ""

    def rows(self) -> list[tuple]:
        out = [(self.agent, ms, v, self.n_windows) for ms, v in self.horizons.items()]
        out.append((self.agent, "average", self.average, self.n_windows))
        return out


def horizon_report(per_window_frame: np.ndarray, agent: str, fps: int = 24, label: str = "") -> HorizonReport:
    """Aggregate an ``[N, F]`` MPJPE table."""
    n, F = per_window_frame.shape
    per_frame = np.array([_ordered_mean(per_window_frame[:, f]) for f in range(F)])
    horizons = {ms: float(per_frame[frame - 1]) for ms, frame in horizon_frames(fps, F).items()}
    return HorizonReport(agent, horizons, _ordered_mean(per_window_frame), n, per_frame, label)


def evaluate(predictor: Callable | dict, windows: list[InteractionWindow], fps: int = 24, pelvis_index: int = 0,
             include_pelvis: bool = False, label: str = "") -> dict[str, HorizonReport]:
    """MPJPE of ``predictor`` on raw-millimetre windows, one report per agent.

    ``predictor`` maps a window list to ``{agent: [N, F, J, 3]}`` or is such
    a dict already.
    """
    if not windows:
        raise InputError("evaluation needs at least one test window")
    preds = predictor if isinstance(predictor, dict) else predictor(windows)
    out = {}
    for a in AGENTS:
        gt = np.stack([w.fut(a) for w in windows])
        table = mpjpe(preds[a], gt, pelvis_index, include_pelvis)
        out[a] = horizon_report(table, a, fps, label)
    return out


def delayed_eval(predictor: Callable | dict, windows: list[InteractionWindow], fps: int = 24, **kw) -> dict[str, HorizonReport]:
    """:func:`evaluate` on windows built with a delay; reports are labelled with it."""
    delays = {w.meta.delay for w in windows}
    if None in delays:
        raise InputError("delayed evaluation needs windows carrying delay metadata")
    if len(delays) != 1:
        raise InputError(f"windows mix delays {sorted(delays)}")
    d = delays.pop()
    agent = next((w.meta.delayed_agent for w in windows if w.meta.delayed_agent), None)
    label = f"delay={d}" + (f",delayed={agent}" if agent else "")
    return evaluate(predictor, windows, fps, label=label, **kw)


METRICS_HEADER = ("agent", "horizon_ms", "mpjpe_mm", "n_windows")


def metrics_csv(reports: dict[str, HorizonReport], fps: int = 24) -> str:
    buf = io.StringIO()
    frames = ";".join(f"{ms}ms=frame{f}" for ms, f in horizon_frames(fps, 10**6).items())
    buf.write(f"# horizons at {fps} fps: {frames}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for a in AGENTS:
        for agent, ms, v, n in reports[a].rows():
            w.writerow([agent, ms, f"{v:.6f}", n])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


@dataclass
class LinkLengthReport:
    mean_abs_change: float
    std_change: float
    per_link_mean_abs: np.ndarray
    traces: np.ndarray = field(repr=False)  # [N, F, J-1] signed change in mm


def link_length_report(preds: np.ndarray, parents, reference_pose: np.ndarray) -> LinkLengthReport:
    """Link-length drift of position predictions.

    ``preds`` is ``[N, F, J, 3]`` and ``reference_pose`` the last observed
    frame ``[N, J, 3]``; change is measured per link and frame against the
    reference lengths. The std is over the signed changes.
    """
    preds = np.asarray(preds, dtype=np.float64)
    ref = link_lengths(reference_pose, parents)[:, None, :]
    change = link_lengths(preds, parents) - ref
    return LinkLengthReport(
        mean_abs_change=_ordered_mean(np.abs(change)),
        std_change=float(np.std(change)),
        per_link_mean_abs=np.abs(change).mean(axis=(0, 1)),
        traces=change,
    )


def link_length_csv(report: LinkLengthReport, link_names: list[str] | None = None) -> str:
    """``link,frame,abs_change_mm`` averaged over windows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["link", "frame", "abs_change_mm"])
    mean = np.abs(report.traces).mean(axis=0)  # [F, links]
    for k in range(mean.shape[1]):
        name = link_names[k] if link_names else str(k + 1)
        for f in range(mean.shape[0]):
            w.writerow([name, f + 1, f"{mean[f, k]:.6f}"])
    return buf.getvalue()
