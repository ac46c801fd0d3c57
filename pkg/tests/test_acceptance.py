"""Acceptance suite: each test prints one ``CRITERION n: PASS/FAIL`` line.

Criteria 7 to 9 train real models on shapes-world (three seeds) and take several
minutes on one CPU; the rest run in seconds.
"""
import math
import time

import numpy as np
import pytest
import torch

from bam_fss.base_learner import base_loss
from bam_fss.checkpoint import parameter_hash
from bam_fss.config import TrainConfig
from bam_fss.data import SceneSpec, build_shapes_dataset, split_folds
from bam_fss.encoder import EncoderConfig
from bam_fss.ensemble import (EnsembleModule, adjustment_factor, gram_matrix, kshot_weights,
                              total_loss)
from bam_fss.evaluate import evaluate, evaluate_generalized
from bam_fss.generalized import fuse_generalized, fuse_generalized_alt
from bam_fss.meta_learner import MAP_EPS, masked_average_pooling, meta_loss
from bam_fss.metrics import IoUAccumulator, fb_iou, format_flops, gram_flops
from bam_fss.model import BAM, ModelConfig
from bam_fss.train import meta_train, pretrain_base, stage2_model

INSTANCES = 100


# -- brute-force references --------------------------------------------------

def ref_map(f, m):
    c, h, w = len(f), len(f[0]), len(f[0][0])
    total, count = [0.0] * c, 0.0
    for y in range(h):
        for x in range(w):
            if m[y][x]:
                count += 1
                for k in range(c):
                    total[k] += f[k][y][x]
    return [t / (count + MAP_EPS) for t in total]


def ref_gram(f):
    c, h, w = len(f), len(f[0]), len(f[0][0])
    n = h * w
    return [[sum(f[i][y][x] * f[j][y][x] for y in range(h) for x in range(w)) / n
             for j in range(c)] for i in range(c)]


def ref_psi(ga, gb):
    return math.sqrt(sum((a - b) ** 2 for ra, rb in zip(ga, gb) for a, b in zip(ra, rb)))


def ref_fuse(p, m, tau, base_first):
    if base_first and m != 0:
        return m + 1
    if p > tau:
        return 1
    return m + 1 if m != 0 else 0


def ref_counts(preds, gts, n):
    inter, union = [0] * n, [0] * n
    for pred, gt in zip(preds, gts):
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            if g == 255:
                continue
            for c in range(n):
                a, b = p == c, g == c
                inter[c] += a and b
                union[c] += a or b
    return inter, union


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))


def test_criterion_1_oracles(verdict):
    rng = np.random.default_rng(0)
    worst = {"map": 0.0, "gram": 0.0, "psi": 0.0}
    fusion_bad = counting_bad = 0
    for _ in range(INSTANCES):
        c, h, w = (int(v) for v in rng.integers(1, 5, 3))
        f = rng.normal(size=(c, h, w))
        m = rng.random((h, w)) < 0.5
        m[rng.integers(h), rng.integers(w)] = True
        got = masked_average_pooling(torch.from_numpy(f)[None], torch.from_numpy(m)[None].double())
        worst["map"] = max(worst["map"], rel_err(got[0].numpy(), ref_map(f.tolist(), m.tolist())))

        g = rng.normal(size=(2, c, h, w))
        ga, gb = gram_matrix(torch.from_numpy(g))
        ra, rb = ref_gram(g[0].tolist()), ref_gram(g[1].tolist())
        worst["gram"] = max(worst["gram"], rel_err(ga.numpy(), ra), rel_err(gb.numpy(), rb))
        psi = adjustment_factor(ga[None], gb[None]).item()
        worst["psi"] = max(worst["psi"], rel_err(psi, ref_psi(ra, rb)))

        tau = float(rng.random())
        p = rng.random((h + 2, w + 2))
        mb = rng.integers(0, 5, (h + 2, w + 2))
        for fn, base_first in ((fuse_generalized, False), (fuse_generalized_alt, True)):
            out = fn(p, mb, tau).labels
            ref = [[ref_fuse(p[i, j], mb[i, j], tau, base_first) for j in range(w + 2)]
                   for i in range(h + 2)]
            fusion_bad += int(not np.array_equal(out, np.array(ref)))

        n = int(rng.integers(2, 6))
        preds = [rng.integers(0, n, (h + 3, w + 3)) for _ in range(3)]
        gts = [np.where(rng.random((h + 3, w + 3)) < 0.1, 255, rng.integers(0, n, (h + 3, w + 3)))
               for _ in range(3)]
        acc = IoUAccumulator(n)
        for a, b in zip(preds, gts):
            acc.update(a, b)
        inter, union = ref_counts(preds, gts, n)
        counting_bad += int(acc.intersection.tolist() != inter or acc.union.tolist() != union)
        ref_iou = {k: inter[k] / union[k] for k in range(n) if union[k]}
        counting_bad += int(acc.per_class_iou() != ref_iou)
        fg_p = [(a > 0).astype(int) for a in preds]
        fg_g = [np.where(b == 255, 255, b > 0) for b in gts]
        fi, fu = ref_counts(fg_p, fg_g, 2)
        ref_fb = np.mean([fi[k] / fu[k] for k in range(2) if fu[k]])
        counting_bad += int(fb_iou(preds, gts) != ref_fb)
    ok = max(worst.values()) <= 1e-6 and fusion_bad == 0 and counting_bad == 0
    verdict(1, ok, f"{INSTANCES} random instances each; max rel err MAP {worst['map']:.1e}, "
                   f"Gram {worst['gram']:.1e}, psi {worst['psi']:.1e}; fusion mismatches "
                   f"{fusion_bad}, IoU/FB-IoU counting mismatches {counting_bad}")


# -- shared tiny world --------------------------------------------------------

TINY_ENCODER = EncoderConfig(channels=(8, 8, 16, 16))


@pytest.fixture(scope="module")
def tiny_world():
    data = build_shapes_dataset(60, SceneSpec(canvas_size=32, size_range=(8, 14),
                                              color_jitter=0.12), seed=11)
    return data, split_folds(12, 0, 4)


@pytest.fixture(scope="module")
def tiny_stage1(tiny_world, tmp_path_factory):
    data, split = tiny_world
    config = TrainConfig(stage="pretrain", epochs=2, batch_size=8, lr=0.02, seeds=(0,))
    cfg = ModelConfig(num_base=split.num_base, encoder=TINY_ENCODER, base_width=16, meta_dim=16)
    path = tmp_path_factory.mktemp("acc") / "stage1.npz"
    pretrain_base(config, data, split, seed=0, model_config=cfg, out_path=path)
    return path


def test_criterion_2_init_identity(verdict, tiny_world, tiny_stage1):
    g = torch.Generator().manual_seed(0)
    ens = EnsembleModule()
    worst = 0.0
    for _ in range(INSTANCES):
        b, h, w = (int(v) for v in torch.randint(1, 6, (3,), generator=g))
        p_m = torch.randn(b, 2, h, w, generator=g).softmax(1)
        out = ens(p_m, torch.rand(b, 1, h, w, generator=g), torch.rand(b, generator=g))
        worst = max(worst, (out - p_m).abs().max().item())

    config = TrainConfig(stage="meta", episodes=12, seeds=(0, 1), eval_batch=6)
    model, split = stage2_model(config, tiny_stage1, seed=0)
    res = evaluate(config, None, tiny_world[0], learners=("bam", "meta-only"),
                   model=model.eval(), split=split)
    same = all(a.miou == b.miou and a.fb_iou == b.fb_iou
               for a, b in zip(res["bam"], res["meta-only"]))
    verdict(2, worst <= 1e-7 and same,
            f"max |p_f - p_m| over {INSTANCES} inputs = {worst:.1e}; step-0 evaluate "
            f"bam (mIoU, FB-IoU) {[(r.miou, r.fb_iou) for r in res['bam']]} vs meta-only "
            f"{[(r.miou, r.fb_iou) for r in res['meta-only']]}")


# -- criterion 3 ------------------------------------------------------------------

def _fd_check(params, loss_fns, h=1e-5):
    """Worst per-tensor relative error ||analytic - numeric|| / ||numeric|| and the
    worst entry-wise relative error (entries with magnitude above 1e-6) per loss."""
    out = {}
    for name, fn in loss_fns.items():
        grads = torch.autograd.grad(fn(), params, allow_unused=True)
        tensor_err = entry_err = 0.0
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            num = torch.zeros_like(p).view(-1)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                with torch.no_grad():
                    flat[i] = orig + h
                    up = fn().item()
                    flat[i] = orig - h
                    down = fn().item()
                    flat[i] = orig
                num[i] = (up - down) / (2 * h)
            ana = g.reshape(-1)
            denom = max(num.norm().item(), 1e-12)
            if num.norm().item() > 1e-9 or ana.norm().item() > 1e-9:
                tensor_err = max(tensor_err, (ana - num).norm().item() / denom)
            big = torch.maximum(ana.abs(), num.abs()) > 1e-6
            if big.any():
                e = ((ana - num).abs()[big] / torch.maximum(ana.abs(), num.abs())[big]).max()
                entry_err = max(entry_err, e.item())
        out[name] = (tensor_err, entry_err, sum(p.numel() for p in params))
    return out


def test_criterion_3_gradients(verdict):
    torch.manual_seed(0)
    cfg = ModelConfig(num_base=2, encoder=EncoderConfig(channels=(4, 4, 4, 4), groups=2),
                      base_width=4, meta_dim=4, shots=2)
    model = BAM(cfg).double().eval()
    with torch.no_grad():
        model.ensemble.w_psi.weight.copy_(torch.tensor([0.8, -0.3]).view(1, 2, 1, 1))
        model.ensemble.w_ens.weight.copy_(torch.tensor([1.2, 0.6]).view(1, 2, 1, 1))
        model.reweighter.w2.normal_(0, 0.5)
    g = torch.Generator().manual_seed(1)
    q = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    s = torch.rand(2, 2, 3, 32, 32, generator=g, dtype=torch.float64)
    sm = torch.zeros(2, 2, 32, 32, dtype=torch.float64)
    sm[..., 8:24, 6:20] = 1
    gt_bin = torch.zeros(2, 32, 32, dtype=torch.long)
    gt_bin[:, 10:26, 12:28] = 1
    gt_base = torch.randint(0, 3, (2, 32, 32), generator=g)

    def base():
        return base_loss(model.base(model.encoder(q).b4, (32, 32)), gt_base)

    def meta():
        return meta_loss(model(q, s, sm).p_m, gt_bin)

    def total():
        out = model(q, s, sm)
        return total_loss(out.p_f, out.p_m, gt_bin, lam=1.0)

    start = time.time()
    stage1 = model.stage1_parameters()
    stage2 = model.stage2_parameters()
    res = _fd_check(stage1, {"base": base})
    res.update(_fd_check(stage2, {"meta": meta, "total": total}))
    worst = max(max(t, e) for t, e, _ in res.values())
    detail = "; ".join(f"{k}: {n} params, tensor rel {t:.1e}, entry rel {e:.1e}"
                       for k, (t, e, n) in res.items())
    verdict(3, worst <= 1e-4, f"float64 central differences, {detail}; "
                              f"{time.time() - start:.0f}s")


def test_criterion_4_flops(verdict):
    value = gram_flops(512, 60, 60)
    formula = 512 ** 2 * (4 * 60 * 60 + 3)
    quoted = 3_775_932_432
    shown = format_flops(value)
    ok = value == formula and shown == "3.78G" and format_flops(quoted) == shown
    verdict(4, ok, f"gram_flops(512, 60, 60) = {value:,} = C^2(4HW+3), displayed {shown}; "
                   f"the quoted literal {quoted:,} differs by {quoted - value:,} and is not a "
                   f"multiple of C^2 ({quoted % 512 ** 2:,} remainder), so it cannot come from "
                   f"the operation count; it displays as {format_flops(quoted)} as well")


def test_criterion_5_kshot_weights(verdict):
    g = torch.Generator().manual_seed(0)
    uniform_bad = 0
    for k in range(1, 11):
        for _ in range(10):
            psi = torch.rand(3, k, generator=g, dtype=torch.float64) * 50
            w1 = torch.randn(k, k, generator=g, dtype=torch.float64)
            eta = kshot_weights(psi, w1, torch.zeros(k, k, dtype=torch.float64)).eta
            uniform_bad += int(not torch.allclose(eta, torch.full_like(eta, 1 / k), atol=1e-12))
    worst_sum, min_eta = 0.0, 1.0
    for _ in range(1000):
        r = int(torch.randint(1, 4, (1,), generator=g))
        k = r * int(torch.randint(1, 5, (1,), generator=g))
        scale = float(torch.rand(1, generator=g)) * 5
        w1 = torch.randn(k, k // r, generator=g, dtype=torch.float64) * scale
        w2 = torch.randn(k // r, k, generator=g, dtype=torch.float64) * scale
        psi = torch.rand(4, k, generator=g, dtype=torch.float64)   # squashed psi lies in [0, 1)
        eta = kshot_weights(psi, w1, w2, r).eta
        worst_sum = max(worst_sum, (eta.sum(-1) - 1).abs().max().item())
        min_eta = min(min_eta, eta.min().item())
    ok = uniform_bad == 0 and worst_sum <= 1e-6 and min_eta > 0
    verdict(5, ok, f"w2 = 0 non-uniform cases {uniform_bad}/100; over 1000 random "
                   f"parameterizations max |sum eta - 1| = {worst_sum:.1e}, min eta = {min_eta:.2e}")


def test_criterion_6_frozen(verdict, tiny_world, tiny_stage1):
    from bam_fss.checkpoint import load_checkpoint
    config = TrainConfig(stage="meta", batch_size=4, lr=0.01, seeds=(0,))
    result = meta_train(config, tiny_stage1, tiny_world[0], seed=0, steps=100)
    stage1, _ = load_checkpoint(tiny_stage1)
    before = parameter_hash([stage1.encoder, stage1.base])
    after = parameter_hash([result.model.encoder, result.model.base])
    moved = any(not torch.equal(a, b) for a, b in
                zip(stage1.meta.state_dict().values(), result.model.meta.state_dict().values()))
    ok = before == after == result.frozen_hash_before == result.frozen_hash_after and moved
    verdict(6, ok, f"100 stage-2 steps; encoder+base sha256 {before[:12]} before, "
                   f"{after[:12]} after; meta learner parameters moved: {moved}")


def test_criterion_10_difference_set(verdict):
    ps = np.round(np.linspace(0, 1, 201), 3)
    ms = np.arange(0, 16)
    checked = bad = 0
    for tau in np.round(np.linspace(0, 1, 21), 2):
        p, m = (a.T for a in np.meshgrid(ps, ms))
        main = fuse_generalized(p, m, tau).labels
        alt = fuse_generalized_alt(p, m, tau).labels
        bad += int(not np.array_equal(main != alt, (p > tau) & (m != 0)))
        checked += p.size
    verdict(10, bad == 0, f"{checked:,} (p, m_b, tau) grid points; disagreement set equals "
                          f"{{p > tau and m_b != 0}} at every tau: {bad == 0}")


# -- criteria 7 to 9: desk-scale training runs -------------------------------------

DESK_SEEDS = (0, 1, 2)
DESK_SPEC = SceneSpec(color_jitter=0.12)
DESK_STAGE1 = TrainConfig(stage="pretrain", epochs=10, batch_size=12, lr=0.01)
DESK_STAGE2 = TrainConfig(stage="meta", batch_size=8, lr=0.05, episodes=200, eval_batch=25)
DESK_STEPS = 800
DESK_TRAIN_IMAGES = 2000
ARMS = {"bam": {}, "meta-only": {"use_ensemble": False}, "psi-off": {"use_psi": False},
        "bam-5shot": {"shots": 5, "batch_size": 4}}


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Per seed: one stage-1 checkpoint and one stage-2 model per arm; the test images
    are shared and disjoint from every training set."""
    root = tmp_path_factory.mktemp("desk")
    split = split_folds(12, 0, 4)
    test = build_shapes_dataset(400, DESK_SPEC, seed=999)
    models, timings = {}, {}
    for seed in DESK_SEEDS:
        start = time.time()
        train = build_shapes_dataset(DESK_TRAIN_IMAGES, DESK_SPEC, seed=100 + seed)
        ckpt = root / f"stage1_{seed}.npz"
        pretrain_base(DESK_STAGE1, train, split, seed=seed, out_path=ckpt)
        for arm, kw in ARMS.items():
            config = DESK_STAGE2.override(**kw)
            models[arm, seed] = meta_train(config, ckpt, train, seed=seed, steps=DESK_STEPS).model
        timings[seed] = time.time() - start
    return models, split, test, timings


def _miou(desk, arm, learner, shots=1):
    models, split, test, _ = desk
    out = []
    for seed in DESK_SEEDS:
        config = DESK_STAGE2.override(shots=shots, seeds=(seed,))
        rec = evaluate(config, None, test, learners=(learner,), model=models[arm, seed],
                       split=split)[learner][0]
        out.append(rec.miou)
    return np.array(out)


def _overlap(a, b):
    lo_a, hi_a = a.mean() - a.std(), a.mean() + a.std()
    lo_b, hi_b = b.mean() - b.std(), b.mean() + b.std()
    return "overlapping" if lo_a <= hi_b and lo_b <= hi_a else "separated"


def _fmt(a):
    return f"{a.mean():.3f} +/- {a.std():.3f} {np.round(a, 3).tolist()}"


def test_criterion_7_ablation_trend(verdict, desk):
    bam = _miou(desk, "bam", "bam")
    meta = _miou(desk, "meta-only", "meta-only")
    psi_off = _miou(desk, "psi-off", "bam")
    d1, d2 = bam.mean() - meta.mean(), bam.mean() - psi_off.mean()
    minutes = sum(desk[3].values()) / 60
    verdict(7, d1 >= 0 and d2 >= 0,
            f"novel 1-shot mIoU over seeds {list(DESK_SEEDS)}: BAM {_fmt(bam)}, meta-only "
            f"baseline {_fmt(meta)}, psi-off {_fmt(psi_off)}; margins BAM - meta {d1:+.3f} "
            f"({_overlap(bam, meta)} 1-std bands), psi-on - psi-off {d2:+.3f} "
            f"({_overlap(bam, psi_off)}); training {minutes:.1f} min for all arms")


def test_criterion_8_generalized(verdict, desk):
    # The row without the ensemble is the meta-only baseline trained on the same frozen
    # stage 1. mIoU_b identity is checked under the base-first rule, where base pixels
    # never depend on the novel score; the novel-first rule is reported alongside.
    models, split, test, _ = desk
    rows = {scheme: ([], [], []) for scheme in ("alt", "main")}
    for seed in DESK_SEEDS:
        config = DESK_STAGE2.override(seeds=(seed,))
        for scheme, (n_with, n_without, b_gap) in rows.items():
            recs = evaluate_generalized(config, None, test, tau=0.9, scheme=scheme,
                                        model=models["bam", seed], split=split,
                                        baseline=models["meta-only", seed])["records"]
            a, b = recs["bam"][0], recs["bam-without-ensemble"][0]
            n_with.append(a.miou_n)
            n_without.append(b.miou_n)
            b_gap.append(abs(a.miou_b - b.miou_b))
    n_with, n_without, b_gap = (np.array(v) for v in rows["alt"])
    m_with, m_without, m_gap = (np.array(v) for v in rows["main"])
    ok = n_with.mean() >= n_without.mean() and b_gap.max() == 0.0
    verdict(8, ok,
            f"tau 0.9 base-first: mIoU_n BAM {_fmt(n_with)} vs without ensemble "
            f"{_fmt(n_without)} (margin {n_with.mean() - n_without.mean():+.3f}), "
            f"max mIoU_b gap {b_gap.max():.1e}; novel-first: mIoU_n {_fmt(m_with)} vs "
            f"{_fmt(m_without)}, max mIoU_b gap {m_gap.max():.1e}")


def test_criterion_9_five_shot(verdict, desk):
    one = _miou(desk, "bam", "bam", shots=1)
    five = _miou(desk, "bam-5shot", "bam", shots=5)
    verdict(9, five.mean() >= one.mean(),
            f"reweighting, novel mIoU 1-shot {_fmt(one)} vs 5-shot {_fmt(five)} "
            f"(margin {five.mean() - one.mean():+.3f})")
