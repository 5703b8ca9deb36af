"""Tensor splitting parallelism for sequential 3-D layer chains.

The output depth axis is cut into disjoint segments.  Each segment's input
range is found by propagating its interval backwards through the chain, so a
segment carries exactly the halo it needs and the stitched result equals the
monolithic forward pass.  Group-norm layers split the chain into stages:
every segment advances to the next norm boundary, per-segment partial sums
are reduced to global statistics, and only then does the next stage start.

A sliding-window executor (independent windows, blended) is provided as the
comparison baseline, together with a seam score and a memory model.
"""
from __future__ import annotations

import logging
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .nn import functional as F
from .nn.layers import LayerChain
from .tensor import Interval, slice_axis, write_axis

log = logging.getLogger(__name__)

SPLIT_AXIS = "d"
_BIG = 1 << 40


def required_input_interval(layer, out_iv: Interval, in_extent: int) -> Interval:
    """Smallest input depth range that determines ``out_iv`` of ``layer``'s output."""
    if layer.kind == "conv3d":
        k, s, p = layer.kernel[0], layer.stride[0], layer.padding[0]
        start = max(out_iv.start * s - p, 0)
        end = min((out_iv.end - 1) * s - p + k, in_extent)
    elif layer.kind == "upsample":
        start = out_iv.start // 2
        end = min(-(-out_iv.end // 2), in_extent)
    else:
        start, end = out_iv.start, min(out_iv.end, in_extent)
    if end <= start:
        raise ValueError(f"empty input interval for {layer!r} and output {out_iv}")
    return Interval(start, end)


def conv_d_pads(layer, out_iv: Interval, in_iv: Interval):
    """Zero rows a segment needs on each side: only what boundary clipping removed."""
    k, s, p = layer.kernel[0], layer.stride[0], layer.padding[0]
    lo = in_iv.start - (out_iv.start * s - p)
    hi = ((out_iv.end - 1) * s - p + k) - in_iv.end
    return lo, hi


def partition(extent: int, n: int):
    """``n`` near-equal disjoint intervals covering ``[0, extent)``; leading ones take the remainder."""
    if not 1 <= n <= extent:
        raise ValueError(f"cannot split extent {extent} into {n} segments")
    base, rem = divmod(extent, n)
    out, start = [], 0
    for i in range(n):
        size = base + (1 if i < rem else 0)
        out.append(Interval(start, start + size))
        start += size
    return out


@dataclass
class SegmentPlan:
    output: Interval
    input: Interval
    layer_inputs: list
    layer_outputs: list


@dataclass
class StagePlan:
    start: int
    stop: int
    in_extent: int
    out_extent: int
    segments: list
    starts_with_norm: bool = False


@dataclass
class SplitPlan:
    input_shape: tuple
    n_segments: int
    stages: list
    shapes: list
    scales: list
    axis: str = SPLIT_AXIS

    @property
    def output_intervals(self):
        return [s.output for s in self.stages[-1].segments]

    @property
    def input_intervals(self):
        return [s.input for s in self.stages[0].segments]

    @property
    def boundaries(self):
        return [iv.start for iv in self.output_intervals[1:]]

    def validate(self, chain: LayerChain):
        for stage in self.stages:
            cover = sorted(s.output for s in stage.segments)
            if cover[0].start != 0 or cover[-1].end != stage.out_extent:
                raise AssertionError("segment outputs do not cover the stage output")
            for a, b in zip(cover, cover[1:]):
                if a.end != b.start:
                    raise AssertionError("segment outputs overlap or leave gaps")
            for seg in stage.segments:
                for k, li in enumerate(range(stage.start, stage.stop)):
                    need = required_input_interval(chain[li], seg.layer_outputs[k], self.shapes[li][2])
                    if not seg.layer_inputs[k].contains(need):
                        raise AssertionError(f"segment input undercovers layer {li}")


def _stage_bounds(chain):
    cuts = [0] + [i for i, layer in enumerate(chain) if layer.kind == "groupnorm" and i > 0]
    return list(zip(cuts, cuts[1:] + [len(chain)]))


def plan_split(chain: LayerChain, input_dims, n_segments: int) -> SplitPlan:
    """Cut the output depth into ``n_segments`` and back-propagate the halos.

    Stages whose output is shallower than ``n_segments`` use one segment per
    output row instead.
    """
    shapes = chain.shapes(input_dims)
    out_extent = shapes[-1][2]
    if not 1 <= n_segments <= out_extent:
        raise ValueError(f"output depth {out_extent} cannot be split into {n_segments} segments")
    scales = []
    for layer in chain:
        if layer.kind == "conv3d":
            scales.append(Fraction(1, layer.stride[0]))
        elif layer.kind == "upsample":
            scales.append(Fraction(2))
        else:
            scales.append(Fraction(1))
    stages = []
    for lo, hi in _stage_bounds(chain):
        stage_out = shapes[hi][2]
        segments = []
        for core in partition(stage_out, min(n_segments, stage_out)):
            outs, ins = [], []
            iv = core
            for li in range(hi - 1, lo - 1, -1):
                outs.append(iv)
                iv = required_input_interval(chain[li], iv, shapes[li][2])
                ins.append(iv)
            segments.append(SegmentPlan(core, iv, ins[::-1], outs[::-1]))
        norm_first = hi > lo and chain[lo].kind == "groupnorm"
        stages.append(StagePlan(lo, hi, shapes[lo][2], stage_out, segments, norm_first))
    return SplitPlan(tuple(input_dims), n_segments, stages, shapes, scales)


def _run_segment(chain, stage, seg, src, stats, global_norm):
    x = slice_axis(src, SPLIT_AXIS, seg.input)
    for k, li in enumerate(range(stage.start, stage.stop)):
        layer = chain[li]
        in_iv, out_iv = seg.layer_inputs[k], seg.layer_outputs[k]
        if layer.kind == "groupnorm":
            x = layer.apply(x, stats if global_norm else F.groupnorm_stats(layer.groups, x))
        elif layer.kind == "conv3d":
            x = layer.forward(x, d_pad=conv_d_pads(layer, out_iv, in_iv))
        elif layer.kind == "upsample":
            off = out_iv.start - 2 * in_iv.start
            x = np.ascontiguousarray(layer.forward(x)[:, :, off:off + len(out_iv)])
        else:
            x = layer.forward(x)
    return x


def execute_tsp(chain: LayerChain, x: np.ndarray, plan: SplitPlan, mode="sequential",
                workers=None, global_norm=True) -> np.ndarray:
    """Run ``chain`` on ``x`` segment by segment and stitch the result.

    ``mode`` is ``"sequential"`` (one segment live at a time) or
    ``"parallel"`` (a bounded thread pool; segments write disjoint stitch
    regions).  ``global_norm=False`` is the ablation that normalises each
    segment with its own statistics and breaks equivalence.
    """
    if tuple(x.shape) != tuple(plan.input_shape):
        raise ValueError(f"plan built for {plan.input_shape}, got input {x.shape}")
    if len(plan.shapes) != len(chain) + 1:
        raise ValueError("plan does not match chain length")
    if mode not in ("sequential", "parallel"):
        raise ValueError(f"unknown mode {mode!r}")
    pool = ThreadPoolExecutor(max_workers=workers or plan.n_segments) if mode == "parallel" else None
    try:
        src = x
        stats = None
        if plan.stages[0].starts_with_norm and global_norm:
            norm = chain[0]
            parts = [norm.partial(slice_axis(x, SPLIT_AXIS, iv))
                     for iv in partition(x.shape[2], min(plan.n_segments, x.shape[2]))]
            stats = F.groupnorm_stats(norm.groups, partial=F.combine_partials(parts))
        for si, stage in enumerate(plan.stages):
            dst = np.empty(plan.shapes[stage.stop], dtype=x.dtype)
            nxt = plan.stages[si + 1] if si + 1 < len(plan.stages) else None
            next_norm = chain[nxt.start] if nxt is not None and nxt.starts_with_norm else None

            def work(seg, stage=stage, src=src, dst=dst, stats=stats, next_norm=next_norm):
                y = _run_segment(chain, stage, seg, src, stats, global_norm)
                write_axis(dst, SPLIT_AXIS, seg.output, y)
                return next_norm.partial(y) if (next_norm is not None and global_norm) else None

            if pool is None:
                parts = [work(seg) for seg in stage.segments]
            else:
                parts = list(pool.map(work, stage.segments))
            stats = None
            if next_norm is not None and global_norm:
                stats = F.groupnorm_stats(next_norm.groups, partial=F.combine_partials(parts))
            src = dst
        return src
    finally:
        if pool is not None:
            pool.shutdown()


# -- sliding-window baseline ---------------------------------------------------

def receptive_field(chain: LayerChain) -> int:
    """Input depth extent that influences one output voxel (ignoring borders)."""
    iv = Interval(_BIG, _BIG + 1)
    for layer in reversed(chain.layers):
        iv = required_input_interval(layer, iv, 4 * _BIG)
    return len(iv)


@dataclass
class SlidingWindowResult:
    output: np.ndarray
    window_starts: list
    boundaries: list
    below_receptive_field: bool


def _blend_weights(extent, blend):
    if blend == "constant":
        return np.ones(extent)
    if blend == "gaussian":
        centre = (extent - 1) / 2.0
        sigma = extent / 4.0
        return np.exp(-0.5 * ((np.arange(extent) - centre) / sigma) ** 2)
    raise ValueError(f"unknown blend {blend!r}")


def execute_sliding_window(chain: LayerChain, x: np.ndarray, window_extent: int,
                           overlap_fraction: float, blend="constant") -> SlidingWindowResult:
    """Independent depth windows through ``chain``, blended by normalised weights.

    No halo logic: each window is zero-padded at its own edges, which is the
    source of the seams this baseline exists to expose.
    """
    E = x.shape[2]
    if not 1 <= window_extent <= E:
        raise ValueError(f"window {window_extent} must lie in [1, {E}]")
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap_fraction must be in [0, 1)")
    step = max(1, int(round(window_extent * (1 - overlap_fraction))))
    starts = list(range(0, E - window_extent + 1, step))
    if starts[-1] != E - window_extent:
        starts.append(E - window_extent)
    scale = chain.d_scale()
    out_shape = chain.shapes(x.shape)[-1]
    acc = np.zeros(out_shape, dtype=np.float64)
    wsum = np.zeros(out_shape[2], dtype=np.float64)
    spans = []
    for s in starts:
        o0 = s * scale
        if o0.denominator != 1:
            raise ValueError(f"window start {s} does not map to an integer output row")
        o0 = int(o0)
        y = chain.forward(np.ascontiguousarray(x[:, :, s:s + window_extent]))
        ow = min(y.shape[2], out_shape[2] - o0)
        w = _blend_weights(ow, blend)
        acc[:, :, o0:o0 + ow] += y[:, :, :ow] * w[None, None, :, None, None]
        wsum[o0:o0 + ow] += w
        spans.append((o0, o0 + ow))
    if np.any(wsum == 0):
        raise ValueError("windows leave output rows uncovered")
    out = (acc / wsum[None, None, :, None, None]).astype(x.dtype)
    edges = {a for a, _ in spans[1:]} | {b for _, b in spans[:-1]}
    boundaries = sorted(e for e in edges if 0 < e < out_shape[2])
    rf = receptive_field(chain)
    if window_extent < rf:
        log.warning("window %d is smaller than the chain receptive field %d", window_extent, rf)
    return SlidingWindowResult(out, starts, boundaries, window_extent < rf)


def seam_artifact_score(y, y_ref, boundaries, band=1) -> float:
    """Mean ``|y - y_ref|`` over depth slabs ``[b - band, b + band)`` around each boundary."""
    if y.shape != y_ref.shape:
        raise ValueError(f"dim mismatch: {y.shape} vs {y_ref.shape}")
    if not boundaries:
        raise ValueError("empty boundary list")
    if band < 1:
        raise ValueError("band must be >= 1")
    D = y.shape[2]
    mask = np.zeros(D, dtype=bool)
    for b in boundaries:
        if not 0 <= b <= D:
            raise ValueError(f"boundary {b} outside depth extent {D}")
        mask[max(0, b - band):min(D, b + band)] = True
    diff = np.abs(y[:, :, mask].astype(np.float64) - y_ref[:, :, mask])
    return float(diff.mean())


# -- memory accounting ---------------------------------------------------------

def _nbytes(shape, d=None, itemsize=4):
    shape = list(shape)
    if d is not None:
        shape[2] = d
    return int(np.prod(shape)) * itemsize


@dataclass
class MemoryReport:
    layer_bytes: list
    monolithic_peak_bytes: int
    n_segments: int = 1
    segment_peak_bytes: int = None
    plan_peak_bytes: int = None
    stage_peak_bytes: list = field(default_factory=list)
    measured_monolithic_bytes: int = None
    measured_plan_bytes: int = None


def measure_peak(fn, *args, **kwargs):
    """Run ``fn`` and return ``(result, peak_bytes)`` from the tracemalloc high-water mark."""
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    try:
        base = tracemalloc.get_traced_memory()[0]
        tracemalloc.reset_peak()
        result = fn(*args, **kwargs)
        peak = tracemalloc.get_traced_memory()[1] - base
    finally:
        if started:
            tracemalloc.stop()
    return result, peak


def memory_report(chain: LayerChain, input_dims, plan: SplitPlan = None, x=None,
                  mode="sequential", itemsize=4) -> MemoryReport:
    """Analytic activation-memory model, optionally backed by measurement on ``x``.

    The monolithic peak is the largest input+output pair over the layers.  For
    a plan, each stage costs its largest per-segment input+output pair plus
    the full-size stitch buffers alive during that stage.
    """
    shapes = chain.shapes(input_dims)
    layer_bytes = [_nbytes(s, itemsize=itemsize) for s in shapes]
    if len(chain):
        mono = max(layer_bytes[i] + layer_bytes[i + 1] for i in range(len(chain)))
    else:
        mono = layer_bytes[0]
    report = MemoryReport(layer_bytes, mono)
    if plan is not None:
        report.n_segments = plan.n_segments
        seg_peak = 0
        for si, stage in enumerate(plan.stages):
            stage_seg = 0
            for seg in stage.segments:
                if stage.stop == stage.start:
                    stage_seg = max(stage_seg, _nbytes(shapes[stage.start], len(seg.input), itemsize))
                for k, li in enumerate(range(stage.start, stage.stop)):
                    pair = (_nbytes(shapes[li], len(seg.layer_inputs[k]), itemsize)
                            + _nbytes(shapes[li + 1], len(seg.layer_outputs[k]), itemsize))
                    stage_seg = max(stage_seg, pair)
            buffers = layer_bytes[stage.stop] + (layer_bytes[stage.start] if si > 0 else 0)
            report.stage_peak_bytes.append(stage_seg + buffers)
            seg_peak = max(seg_peak, stage_seg)
        report.segment_peak_bytes = seg_peak
        report.plan_peak_bytes = max(report.stage_peak_bytes)
    if x is not None:
        _, report.measured_monolithic_bytes = measure_peak(chain.forward, x)
        if plan is not None:
            _, report.measured_plan_bytes = measure_peak(execute_tsp, chain, x, plan, mode)
    return report


BENCH_COLUMNS = ["chain_id", "n_segments", "mode", "analytic_peak_bytes",
                 "measured_peak_bytes", "wall_ms", "max_abs_diff_vs_monolithic"]


def run_benchmark(chain: LayerChain, x, segments, modes, chain_id="chain", workers=None):
    """One row per (segments, mode) with memory, timing and equivalence columns.

    ``"monolithic"`` in ``modes`` adds a single unsplit reference row.
    """
    t0 = time.perf_counter()
    reference = chain.forward(x)
    mono_ms = (time.perf_counter() - t0) * 1e3
    rows = []
    if "monolithic" in modes:
        _, measured = measure_peak(chain.forward, x)
        rows.append({
            "chain_id": chain_id, "n_segments": 1, "mode": "monolithic",
            "analytic_peak_bytes": memory_report(chain, x.shape).monolithic_peak_bytes,
            "measured_peak_bytes": measured, "wall_ms": round(mono_ms, 3),
            "max_abs_diff_vs_monolithic": 0.0,
        })
        modes = [m for m in modes if m != "monolithic"]
    for n in segments:
        plan = plan_split(chain, x.shape, n)
        report = memory_report(chain, x.shape, plan)
        for mode in modes:
            t0 = time.perf_counter()
            y = execute_tsp(chain, x, plan, mode, workers)
            wall = (time.perf_counter() - t0) * 1e3
            _, measured = measure_peak(execute_tsp, chain, x, plan, mode, workers)
            rows.append({
                "chain_id": chain_id,
                "n_segments": n,
                "mode": mode,
                "analytic_peak_bytes": report.plan_peak_bytes,
                "measured_peak_bytes": measured,
                "wall_ms": round(wall, 3),
                "max_abs_diff_vs_monolithic": float(np.max(np.abs(y - reference))),
            })
    return rows
