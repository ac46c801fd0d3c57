"""Episodic evaluation: standard FSS metrics and the generalized setting."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .base_learner import base_argmax_mask
from .checkpoint import load_checkpoint, parameter_hash, split_from_dict
from .config import TrainConfig
from .data import ClassSplit, Episode, SegDataset, collate, sample_episode
from .generalized import SCHEMES
from .metrics import IoUAccumulator, MetricsRecord, ResultsTable, generalized_from_accumulator
from .model import BAM, foreground_probability, predict_mask

log = logging.getLogger(__name__)

GENERALIZED_METHODS = ("bam", "bam-without-ensemble")


def draw_episodes(dataset: SegDataset, pool, shots: int, count: int, seed: int,
                  annotation_mode: str = "mask") -> list[Episode]:
    rng = np.random.default_rng(seed)
    return [sample_episode(dataset, pool, shots, rng, support_annotation=annotation_mode)
            for _ in range(count)]


def _batches(episodes, size):
    for i in range(0, len(episodes), size):
        chunk = episodes[i:i + size]
        yield chunk, {k: torch.from_numpy(v) for k, v in collate(chunk).items()}


def _dense_ids(chunk, split: ClassSplit) -> torch.Tensor:
    lookup = {c: d for d, c in enumerate(split.base_ids, start=1)}
    return torch.tensor([lookup.get(e.class_id, 0) for e in chunk])


@torch.no_grad()
def run_episodes(model: BAM, episodes, split: ClassSplit, learners=("bam",),
                 batch_size: int = 16, fusion: str | None = None):
    """Class-wise IoU and FB-IoU accumulators for each learner path."""
    model.eval()
    num_classes = max(split.base_classes | split.novel_classes) + 1
    acc = {l: IoUAccumulator(num_classes) for l in learners}
    fb = {l: IoUAccumulator(2) for l in learners}
    for chunk, batch in _batches(episodes, batch_size):
        dense = _dense_ids(chunk, split)
        out = model(batch["query"], batch["support"], batch["support_mask"], fusion=fusion,
                    class_dense_id=dense)
        for learner in learners:
            pred = predict_mask(out, learner, dense).numpy()
            for e, p in zip(chunk, pred):
                acc[learner].update(p * e.class_id, e.query_mask.astype(np.int64) * e.class_id)
                fb[learner].update(p, e.query_mask)
    return acc, fb


def evaluate(config: TrainConfig, ckpt, dataset: SegDataset, learners=None,
             model: BAM | None = None, split: ClassSplit | None = None,
             fusion: str | None = None) -> dict[str, list[MetricsRecord]]:
    """Per-seed mIoU / FB-IoU on novel-class episodes for each requested learner path."""
    if model is None:
        model, meta = load_checkpoint(ckpt)
        split = split_from_dict(meta["split"])
    learners = tuple(learners or (config.learner,))
    results = {l: [] for l in learners}
    for seed in config.seeds:
        episodes = draw_episodes(dataset, split.novel_classes, config.shots, config.episodes,
                                 seed, config.annotation_mode)
        acc, fb = run_episodes(model, episodes, split, learners, config.eval_batch, fusion)
        for l in learners:
            novel = sorted(split.novel_classes)
            results[l].append(MetricsRecord(
                fold=split.fold_index, seed=seed, miou=acc[l].miou(novel),
                fb_iou=fb[l].miou([0, 1]),
                per_class_iou={c: v for c, v in acc[l].per_class_iou().items() if c in novel},
                method=l, shots=config.shots))
    return results


def seed_summary(records: list[MetricsRecord]) -> dict:
    miou = [r.miou for r in records]
    fb = [r.fb_iou for r in records]
    return {"miou_mean": float(np.mean(miou)), "miou_std": float(np.std(miou)),
            "fb_iou_mean": float(np.mean(fb)), "fb_iou_std": float(np.std(fb)),
            "per_seed": [r.to_dict() for r in records]}


# ---------------------------------------------------------------------------
# generalized FSS


def generalized_target(e: Episode, split: ClassSplit) -> np.ndarray:
    """Original-id label map for an episode: other novel classes are ignored (255)."""
    lab = e.query_labels.astype(np.int64).copy()
    other = np.isin(lab, [c for c in split.novel_classes if c != e.class_id])
    lab[other] = 255
    return lab


@dataclass
class GeneralizedDump:
    class_ids: list = field(default_factory=list)
    p_f1: dict = field(default_factory=dict)          # method -> list of H,W arrays
    m_b: list = field(default_factory=list)
    targets: list = field(default_factory=list)


@torch.no_grad()
def collect_generalized(model: BAM, episodes, split: ClassSplit,
                        batch_size: int = 16, baseline: BAM | None = None) -> GeneralizedDump:
    """Foreground probabilities (with and without the ensemble) and base masks.

    The row without the ensemble reads ``model``'s own meta output, or the meta output
    of ``baseline`` (a model trained without the ensemble) when one is given.
    """
    model.eval()
    if baseline is not None:
        baseline.eval()
    dump = GeneralizedDump(p_f1={m: [] for m in GENERALIZED_METHODS})
    for chunk, batch in _batches(episodes, batch_size):
        out = model(batch["query"], batch["support"], batch["support_mask"])
        with_e = foreground_probability(out, "bam").numpy()
        if baseline is not None:
            out = baseline(batch["query"], batch["support"], batch["support_mask"])
        without_e = foreground_probability(out, "meta-only").numpy()
        m_b = base_argmax_mask(out.p_b).numpy()
        for i, e in enumerate(chunk):
            dump.class_ids.append(e.class_id)
            dump.p_f1["bam"].append(with_e[i])
            dump.p_f1["bam-without-ensemble"].append(without_e[i])
            dump.m_b.append(m_b[i])
            dump.targets.append(generalized_target(e, split))
    return dump


def score_generalized(dump: GeneralizedDump, split: ClassSplit, tau: float = 0.9,
                      scheme: str = "main") -> dict[str, tuple[float, float, float]]:
    fuse = SCHEMES[scheme]
    lookup = split.base_lookup()
    num_classes = max(split.base_classes | split.novel_classes) + 1
    out = {}
    for method, probs in dump.p_f1.items():
        acc = IoUAccumulator(num_classes)
        for p, m_b, cls, tgt in zip(probs, dump.m_b, dump.class_ids, dump.targets):
            acc.update(fuse(p, m_b, tau, cls, lookup).to_original(), tgt)
        out[method] = generalized_from_accumulator(acc, split)
    return out


def evaluate_generalized(config: TrainConfig, ckpt, dataset: SegDataset, tau: float = 0.9,
                         scheme: str = "main", model: BAM | None = None,
                         split: ClassSplit | None = None,
                         taus=None, baseline: BAM | None = None) -> dict:
    """mIoU_n / mIoU_b / mIoU_a per seed for BAM with and without the ensemble.

    ``taus`` additionally sweeps the threshold; the sweep is returned under ``"sweep"``.
    ``baseline`` supplies the row without the ensemble from a separately trained model;
    it must share the base path (encoder and base learner) with ``model``.
    """
    if model is None:
        model, meta = load_checkpoint(ckpt)
        split = split_from_dict(meta["split"])
    if baseline is not None and (parameter_hash([baseline.encoder, baseline.base])
                                 != parameter_hash([model.encoder, model.base])):
        raise ValueError("baseline does not share the stage-1 encoder and base learner")
    records = {m: [] for m in GENERALIZED_METHODS}
    sweep = {m: {float(t): [] for t in (taus or [])} for m in GENERALIZED_METHODS}
    for seed in config.seeds:
        episodes = draw_episodes(dataset, split.novel_classes, config.shots, config.episodes,
                                 seed, config.annotation_mode)
        dump = collect_generalized(model, episodes, split, config.eval_batch, baseline)
        for m, (n, b, a) in score_generalized(dump, split, tau, scheme).items():
            records[m].append(MetricsRecord(fold=split.fold_index, seed=seed, miou=n,
                                            fb_iou=float("nan"), miou_n=n, miou_b=b,
                                            miou_a=a, method=m, shots=config.shots))
        for t in taus or []:
            for m, vals in score_generalized(dump, split, t, scheme).items():
                sweep[m][float(t)].append(vals)
    result = {"records": records}
    if taus:
        result["sweep"] = {m: {t: np.mean(v, axis=0).tolist() for t, v in d.items()}
                           for m, d in sweep.items()}
    return result


# ---------------------------------------------------------------------------
# reporting


def write_results(path, table: ResultsTable, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"table": json.loads(table.to_json())}
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, default=float))
    path.with_suffix(".txt").write_text(table.to_text() + "\n")


def plot_tau_sweep(sweep: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method, curve in sweep.items():
        taus = sorted(curve)
        ax.plot(taus, [curve[t][0] * 100 for t in taus], marker="o", label=f"{method} mIoU_n")
        ax.plot(taus, [curve[t][2] * 100 for t in taus], ls="--", label=f"{method} mIoU_a")
    ax.set_xlabel("tau")
    ax.set_ylabel("mIoU (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_accuracy_vs_flops(points: dict, path) -> None:
    """points: tap name -> (flops, miou)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for tap, (flops, miou) in sorted(points.items()):
        ax.scatter(flops, miou * 100)
        ax.annotate(tap.upper(), (flops, miou * 100))
    ax.set_xscale("log")
    ax.set_xlabel("psi FLOPs")
    ax.set_ylabel("mIoU (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
