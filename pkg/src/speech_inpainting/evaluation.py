"""Experiment driver: corrupt, restore, reconstruct and score over condition grids."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .dsp import (SEGMENT_LENGTH, ChannelStats, ContractError, LogMagnitude,
                  analyze, denormalize, istft, normalize, read_wav,
                  reconstruct_phase, write_wav)
from .lpc import LpcConfig, inpaint_time_masks
from .masks import (EVAL_SIZES, FillMode, Mask, MaskKind, MaskSpec, apply_mask,
                    sample_mask)
from .metrics import PesqUnavailable, default_pesq_backend, pesq, stoi

log = logging.getLogger(__name__)

CSV_FIELDS = ("intrusion", "size", "scenario", "n", "stoi_mean", "stoi_std",
              "pesq_mean", "pesq_std", "seed")
NA = "NA"

_REFERENCE_FILLS = {"Gaps": FillMode.ZEROS, "Noise": FillMode.SPEECH_SHAPED}


@dataclass(frozen=True)
class Scenario:
    """How a corrupted segment is (or is not) restored.

    Labels: ``Gaps`` and ``Noise`` (unprocessed references), ``LPC``,
    ``Input:<fill>`` (unprocessed normalized-domain corruption, the blind
    models' input), ``Informed[:<name>]`` and ``Blind:<fill>[:<name>]``.
    """
    label: str

    def __post_init__(self):
        self.kind  # validates

    @property
    def kind(self) -> str:
        head = self.label.split(":", 1)[0]
        if head not in ("Gaps", "Noise", "LPC", "Input", "Informed", "Blind"):
            raise ContractError(f"unknown scenario {self.label!r}")
        if head in ("Input", "Blind") and ":" not in self.label:
            raise ContractError(f"scenario {self.label!r} needs a fill mode, e.g. {head}:Zeros")
        return head

    @property
    def fill(self) -> FillMode:
        if self.kind in _REFERENCE_FILLS:
            return _REFERENCE_FILLS[self.kind]
        if self.kind in ("Input", "Blind"):
            return FillMode(self.label.split(":")[1])
        return FillMode.ZEROS

    @property
    def uses_model(self) -> bool:
        return self.kind in ("Informed", "Blind")


@dataclass(frozen=True)
class Condition:
    intrusion: MaskKind
    size: float
    scenario: Scenario

    def __post_init__(self):
        object.__setattr__(self, "intrusion", MaskKind(self.intrusion))
        if isinstance(self.scenario, str):
            object.__setattr__(self, "scenario", Scenario(self.scenario))

    @property
    def applicable(self) -> bool:
        return not (self.scenario.kind == "LPC" and self.intrusion is MaskKind.RANDOM)


@dataclass
class EvalRecord:
    condition: Condition
    n: int
    stoi_mean: Optional[float]
    stoi_std: Optional[float]
    pesq_mean: Optional[float]
    pesq_std: Optional[float]
    seed: int
    n_failed: int = 0
    note: str = ""

    @property
    def available(self) -> bool:
        return self.n > 0

    def row(self) -> dict:
        def fmt(v):
            return NA if v is None else f"{v:.6f}"
        c = self.condition
        return {"intrusion": c.intrusion.value, "size": f"{c.size:.2f}",
                "scenario": c.scenario.label, "n": str(self.n),
                "stoi_mean": fmt(self.stoi_mean), "stoi_std": fmt(self.stoi_std),
                "pesq_mean": fmt(self.pesq_mean), "pesq_std": fmt(self.pesq_std),
                "seed": str(self.seed)}


@dataclass
class EvalConfig:
    seed: int = 0
    workers: int = 1
    use_pesq: bool = True
    lws_iterations: int = 100
    composite: bool = False
    additive_snr_db: float = -15.0
    lpc: LpcConfig = field(default_factory=LpcConfig)


def mask_seed(run_seed: int, segment_id: str, intrusion: MaskKind, size: float) -> int:
    """Per-segment mask seed; unaffected by which other segments are evaluated."""
    key = f"{run_seed}|{segment_id}|{MaskKind(intrusion).value}|{size:.6f}"
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


def condition_mask(cond: Condition, segment_id: str, seed: int) -> Mask:
    return sample_mask(MaskSpec(cond.intrusion, cond.size,
                                mask_seed(seed, segment_id, cond.intrusion, cond.size)))


# --------------------------------------------------------------------------
# per-segment processing

def _corrupt(cond: Condition, wave: np.ndarray, mask: Mask, stats: ChannelStats | None,
             cfg: EvalConfig, fill_seed: int):
    """Return either a finished waveform or a model job ``(input, valid, phase)``."""
    kind = cond.scenario.kind
    m, ph = analyze(wave)
    if kind in ("Gaps", "Noise"):
        mc, pc = apply_mask(m, ph, mask, cond.scenario.fill, seed=fill_seed)
        return "wave", istft(mc, pc)
    if kind == "LPC":
        # frequency blocks stay zeroed; the time gaps are extrapolated
        freq_only = mask.valid | ~mask.valid.any(axis=1, keepdims=True)
        fm = Mask(freq_only, mask.spec)
        mc, pc = apply_mask(m, ph, fm, FillMode.ZEROS)
        return "wave", inpaint_time_masks(istft(mc, pc), mask, cfg.lpc)
    if stats is None:
        raise ContractError(f"scenario {cond.scenario.label} needs channel statistics")
    mn = normalize(m, stats)
    mc, pc = apply_mask(mn, ph, mask, cond.scenario.fill, stats=stats,
                        additive_snr_db=cfg.additive_snr_db, seed=fill_seed)
    if kind == "Input":
        return "wave", istft(denormalize(mc, stats), pc)
    return "model", (mc.values, mask.valid, ph, mn.values)


def _reconstruct(out_values: np.ndarray, stats: ChannelStats, iterations: int,
                 init_phase=None, known=None) -> np.ndarray:
    mag = denormalize(LogMagnitude(out_values, normalized=True), stats)
    phase = reconstruct_phase(mag, iterations, init_phase=init_phase, known=known)
    return istft(mag, phase)


def _score(ref: np.ndarray, deg: np.ndarray, use_pesq: bool):
    s = stoi(ref, deg)
    p = None
    if use_pesq:
        try:
            p = pesq(ref, deg)
        except PesqUnavailable:
            p = None
        except Exception as exc:  # backend errors exclude the segment's PESQ only
            log.warning("PESQ failed: %s", exc)
            p = math.nan
    return s, p


def _finish_job(job):
    """Worker entry: optional phase reconstruction, then scoring."""
    ref, tag, payload, stats, iterations, use_pesq, phase_args = job
    try:
        if tag == "wave":
            deg = payload
        else:
            deg = _reconstruct(payload, stats, iterations, *phase_args)
        if not np.all(np.isfinite(deg)):
            raise FloatingPointError("non-finite reconstruction")
        return _score(ref, deg, use_pesq)
    except Exception as exc:
        log.warning("segment failed: %s", exc)
        return None


def _mean_std(values):
    if not values:
        return None, None
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def run_condition(cond: Condition, segments: Sequence[tuple[str, np.ndarray]],
                  models: Mapping[str, object] | None = None,
                  stats: ChannelStats | None = None, cfg: EvalConfig = EvalConfig(),
                  executor=None) -> EvalRecord:
    """Score one condition over ``(segment_id, waveform)`` pairs."""
    from .unet import restore_batch

    if not cond.applicable:
        return EvalRecord(cond, 0, None, None, None, None, cfg.seed, note="N/A")
    model = None
    if cond.scenario.uses_model:
        model = (models or {}).get(cond.scenario.label)
        if model is None:
            raise ContractError(f"no model supplied for scenario {cond.scenario.label!r}")
    use_pesq = cfg.use_pesq and default_pesq_backend() is not None

    jobs, model_jobs = [], []
    for sid, wave in segments:
        mask = condition_mask(cond, sid, cfg.seed)
        fill_seed = mask_seed(cfg.seed + 1, sid, cond.intrusion, cond.size)
        tag, payload = _corrupt(cond, wave, mask, stats, cfg, fill_seed)
        if tag == "model":
            model_jobs.append((len(jobs), payload))
            jobs.append([wave, tag, None, stats, cfg.lws_iterations, use_pesq, ()])
        else:
            jobs.append([wave, tag, payload, stats, cfg.lws_iterations, use_pesq, ()])

    if model_jobs:
        inputs = np.stack([p[0] for _, p in model_jobs])
        valid = np.stack([p[1] for _, p in model_jobs]) if model.informed else None
        outputs = restore_batch(model, inputs, valid)
        for (i, (_, v, ph, clean_in)), out in zip(model_jobs, outputs):
            values = out.values
            if cfg.composite:
                values = np.where(v, clean_in, values)
                jobs[i][6] = (ph, v)
            jobs[i][2] = values

    jobs = [tuple(j) for j in jobs]
    if executor is not None:
        results = list(executor.map(_finish_job, jobs, chunksize=4))
    else:
        results = [_finish_job(j) for j in jobs]

    ok = [r for r in results if r is not None]
    stoi_mean, stoi_std = _mean_std([r[0] for r in ok])
    pesq_vals = [r[1] for r in ok if r[1] is not None and math.isfinite(r[1])]
    pesq_mean, pesq_std = _mean_std(pesq_vals) if use_pesq else (None, None)
    return EvalRecord(cond, len(ok), stoi_mean, stoi_std, pesq_mean, pesq_std, cfg.seed,
                      n_failed=len(results) - len(ok))


def build_conditions(intrusions=tuple(MaskKind), sizes=EVAL_SIZES,
                     scenarios=("Gaps", "Noise")) -> list[Condition]:
    """Conditions ordered by intrusion, then size, then the given scenario order."""
    return [Condition(MaskKind(k), float(s), Scenario(sc))
            for k in intrusions for s in sizes for sc in scenarios]


def run_grid(conditions: Sequence[Condition], segments: Sequence[tuple[str, np.ndarray]],
             models: Mapping[str, object] | None = None, stats: ChannelStats | None = None,
             cfg: EvalConfig = EvalConfig(), out_csv=None) -> list[EvalRecord]:
    """Evaluate every condition; a failing condition is recorded and skipped."""
    executor = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    records = []
    try:
        for cond in conditions:
            try:
                rec = run_condition(cond, segments, models, stats, cfg, executor)
            except Exception as exc:
                log.error("condition %s failed: %s", cond, exc)
                rec = EvalRecord(cond, 0, None, None, None, None, cfg.seed,
                                 note=f"error: {exc}")
            log.info("%s %s %.2f: n=%d stoi=%s pesq=%s", cond.scenario.label,
                     cond.intrusion.value, cond.size, rec.n, rec.stoi_mean, rec.pesq_mean)
            records.append(rec)
    finally:
        if executor:
            executor.shutdown()
    if out_csv:
        Path(out_csv).write_text(records_to_csv(records))
    return records


def records_to_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for rec in records:
        w.writerow(rec.row())
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# single-file inpainting

def _load_mask_arg(mask) -> Mask | MaskSpec:
    if isinstance(mask, (Mask, MaskSpec)):
        return mask
    return Mask.load(mask)


def inpaint_file(input_wav, model, mask, output_wav, *, stats: ChannelStats,
                 reference_wav=None, composite: bool = True,
                 lws_iterations: int = 100) -> dict:
    """Restore every 1024 ms segment of ``input_wav`` and write ``output_wav``.

    ``mask`` is a :class:`MaskSpec` (a fresh mask per segment, seeded from
    the mask-spec seed and segment index), a :class:`Mask` applied to every
    segment, or a path to a saved mask. The input is treated as clean audio
    that gets corrupted by the mask. With ``composite`` (default) valid bins
    keep their original magnitude and phase, and phase reconstruction runs
    only over masked bins. A trailing partial segment is zero-padded for
    processing and trimmed afterwards.
    """
    from .unet import UNet, load_weights, restore_batch

    if isinstance(model, (str, Path)):
        model = load_weights(model)
    if not isinstance(model, UNet):
        raise ContractError("model must be a U-Net or a path to its weights")
    mask = _load_mask_arg(mask)
    audio = read_wav(input_wav)
    n_seg = max(1, -(-len(audio) // SEGMENT_LENGTH))
    padded = np.zeros(n_seg * SEGMENT_LENGTH)
    padded[:len(audio)] = audio
    reference = None
    if reference_wav is not None:
        reference = read_wav(reference_wav)
        if len(reference) != len(audio):
            raise ContractError("reference and input lengths differ")

    inputs, masks, phases, cleans = [], [], [], []
    for k in range(n_seg):
        seg = padded[k * SEGMENT_LENGTH:(k + 1) * SEGMENT_LENGTH]
        if isinstance(mask, MaskSpec):
            spec = MaskSpec(mask.kind, mask.coverage,
                            mask_seed(mask.seed, f"segment{k}", mask.kind, mask.coverage))
            mk = sample_mask(spec)
        else:
            mk = mask
        m, ph = analyze(seg)
        mn = normalize(m, stats)
        mc, _ = apply_mask(mn, ph, mk, FillMode.ZEROS)
        inputs.append(mc.values)
        masks.append(mk.valid)
        phases.append(ph)
        cleans.append(mn.values)
    outputs = restore_batch(model, np.stack(inputs),
                            np.stack(masks) if model.informed else None)

    out = np.zeros_like(padded)
    report = {"input": str(input_wav), "output": str(output_wav), "segments": []}
    for k, o in enumerate(outputs):
        valid = masks[k]
        values = np.where(valid, cleans[k], o.values) if composite else o.values
        if composite:
            y = _reconstruct(values, stats, lws_iterations, init_phase=phases[k], known=valid)
        else:
            y = _reconstruct(values, stats, lws_iterations)
        out[k * SEGMENT_LENGTH:(k + 1) * SEGMENT_LENGTH] = y
        entry = {"index": k, "coverage": float(1.0 - valid.mean())}
        report["segments"].append(entry)
    out = out[:len(audio)]
    write_wav(output_wav, out)
    if reference is not None:
        for entry in report["segments"]:
            a = entry["index"] * SEGMENT_LENGTH
            b = min(a + SEGMENT_LENGTH, len(audio))
            if b - a == SEGMENT_LENGTH:
                s, p = _score(reference[a:b], out[a:b], True)
                entry["stoi"] = s
                entry["pesq"] = p
    return report


# --------------------------------------------------------------------------
# reporting

def _cell(v, digits=3):
    return "N/A" if v is None else f"{v:.{digits}f}"


def render_report(records: Sequence[EvalRecord], out_dir=None) -> str:
    """Text table with one row per (intrusion, size) and the best cell starred.

    When ``out_dir`` is given, STOI and PESQ versus size plots are written
    there as PNG files, one per intrusion kind.
    """
    if not records:
        raise ContractError("no records to report")
    scenarios = list(dict.fromkeys(r.condition.scenario.label for r in records))
    rows: dict = {}
    for r in records:
        key = (r.condition.intrusion, r.condition.size)
        rows.setdefault(key, {})[r.condition.scenario.label] = r
    kinds = list(MaskKind)
    keys = sorted(rows, key=lambda k: (kinds.index(k[0]), k[1]))

    header = ["Intrusion", "Size"]
    for sc in scenarios:
        header += [f"{sc} STOI", f"{sc} PESQ"]
    lines = [header]
    for key in keys:
        cells = rows[key]
        best = {}
        for metric in ("stoi_mean", "pesq_mean"):
            vals = [(getattr(cells[sc], metric), i) for i, sc in enumerate(scenarios)
                    if sc in cells and cells[sc].available
                    and getattr(cells[sc], metric) is not None]
            if vals:
                best[metric] = scenarios[max(vals, key=lambda t: (t[0], -t[1]))[1]]
        line = [key[0].value, f"{int(round(key[1] * 100))}%"]
        for sc in scenarios:
            rec = cells.get(sc)
            for metric in ("stoi_mean", "pesq_mean"):
                v = getattr(rec, metric) if rec is not None and rec.available else None
                text = _cell(v)
                if v is not None and best.get(metric) == sc:
                    text += "*"
                line.append(text)
        lines.append(line)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    text = "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in lines)
    text += "\n* best in row\n"
    if out_dir is not None:
        _plot(records, scenarios, Path(out_dir))
    return text


def _plot(records, scenarios, out_dir: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    for kind in MaskKind:
        recs = [r for r in records if r.condition.intrusion is kind]
        if not recs:
            continue
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        for ax, metric, name in ((axes[0], "stoi_mean", "STOI"), (axes[1], "pesq_mean", "PESQ")):
            for sc in scenarios:
                pts = sorted((r.condition.size, getattr(r, metric)) for r in recs
                             if r.condition.scenario.label == sc and r.available
                             and getattr(r, metric) is not None)
                if pts:
                    ax.plot([100 * p[0] for p in pts], [p[1] for p in pts], marker="o", label=sc)
            ax.set_xlabel("mask size (%)")
            ax.set_ylabel(name)
            ax.grid(alpha=0.3)
        axes[0].legend(fontsize=8)
        fig.suptitle(kind.value)
        fig.tight_layout()
        fig.savefig(out_dir / f"{kind.value.lower()}.png", dpi=100)
        plt.close(fig)


def records_from_csv(path) -> list[EvalRecord]:
    def num(v):
        return None if v == NA else float(v)
    out = []
    for row in read_csv(path):
        cond = Condition(MaskKind(row["intrusion"]), float(row["size"]), Scenario(row["scenario"]))
        out.append(EvalRecord(cond, int(row["n"]), num(row["stoi_mean"]), num(row["stoi_std"]),
                              num(row["pesq_mean"]), num(row["pesq_std"]), int(row["seed"])))
    return out


def save_report_json(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2))
