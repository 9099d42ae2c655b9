"""Exit criteria, each at its stated tolerance and runtime budget.

Every test feeds the ``criterion`` recorder so the session ends with one
PASS/FAIL line per criterion.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from balora import adapters, linalg, verify
from balora import autodiff as ad
from balora import experiment as ex
from balora import regularizers as reg
from balora.cli import main
from balora.data import CorruptionSpec
from balora.models import ModelPair, forward_pair
from balora.optim import OptimConfig

pytestmark = pytest.mark.acceptance

ARTIFACTS = Path(__file__).resolve().parent.parent / "acceptance_artifacts"


def test_pissa_exactness(criterion):
    c = criterion(1, "PiSSA merge reconstructs W (200 matrices, rel err <= 1e-10)", budget_s=30)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        m, n = rng.integers(1, 65, size=2)
        r = int(rng.integers(1, min(m, n) + 1))
        w = rng.standard_normal((m, n)) * 10.0 ** rng.uniform(-3, 3)
        merged = adapters.merge(adapters.pissa_init(w, r))
        worst = max(worst, np.linalg.norm(merged - w) / np.linalg.norm(w))
    c.note(f"worst={worst:.2e}")
    assert worst <= 1e-10
    c.check_budget()


@pytest.mark.parametrize("kind", ["lora", "pissa"])
@pytest.mark.parametrize("task_mode", ["NLU", "NLG"])
def test_init_identity(criterion, kind, task_mode):
    c = criterion(2, "adapters at step 0 reproduce the reference (1e-9; cr_nlu < 1e-18)")
    mcfg, dcfg = ex.ModelConfig(), ex.DataConfig(pretrain_epochs=5)
    master = ex.seed_master(11, 0)
    splits = ex.make_splits(task_mode, CorruptionSpec(), mcfg, dcfg, master)
    pre = ex.build_pretrained(task_mode, mcfg, dcfg, splits.pretrain, master)
    pair = ModelPair.from_pretrained(pre)
    layers = mcfg.mlp_adapter_layers if task_mode == "NLU" else mcfg.lm_adapter_layers
    rank = mcfg.mlp_rank if task_mode == "NLU" else mcfg.lm_rank
    pair.finetuned.attach_adapters(kind, rank, list(layers), seed=master)
    worst_out, worst_cr = 0.0, 0.0
    for data in (splits.train, splits.id_test, splits.ood_test):
        for start in range(0, len(data), 128):
            out = forward_pair(pair, ad.Tape(), data.x[start : start + 128])
            worst_out = max(worst_out, float(np.max(np.abs(out.ft.value - out.ref))))
            worst_cr = max(worst_cr, float(reg.cr_nlu(out.ref, out.ft).value))
    c.note(f"{task_mode}/{kind}: max|dF|={worst_out:.1e} cr_nlu={worst_cr:.1e}")
    assert worst_out <= 1e-9
    assert worst_cr < 1e-18


def test_gradient_suite(criterion):
    c = criterion(3, "finite-difference gradients of all regularizers and objectives (< 1e-4)", budget_s=120)
    results = verify.run_suite(trials=10, seed=0)
    names = {r.name for r in results}
    assert {"cr_nlu", "dr_nlu", "svdr_nlu", "cr_nlg", "dr_nlg", "svdr_nlg", "objective_nlu", "objective_nlg"} <= names
    assert all(r.points == 10 for r in results)
    worst = max(r.worst for r in results)
    c.note(f"{len(results)} cases, worst={worst:.2e}")
    assert all(r.worst < verify.THRESHOLD for r in results), verify.format_table(results)
    c.check_budget()


def test_closed_form_values(criterion):
    c = criterion(4, "regularizer closed forms")
    lit = reg.RegConfig(entropy_sign="entropy_minimizing")
    cases = [
        ("cr_nlu", reg.cr_nlu(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])), 2.0, 1e-12),
        ("dr_nlu", reg.dr_nlu(np.array([[1.0, 0.0], [0.0, 1.0]])), 0.25, 1e-12),
        ("svdr_nlu", reg.svdr_nlu(np.diag([3.0, 2.0, 1.0]), reg.RegConfig(k_frac=1 / 3)), -0.5, 1e-12),
        ("cr_nlg", reg.cr_nlg(np.array([[0.5, 0.5]]), np.array([[0.25, 0.75]])), 0.143841, 1e-6),
        ("dr_nlg", reg.dr_nlg(np.full((1, 4), 0.25), lit), np.log(4.0), 1e-12),
        ("svdr_nlg", reg.svdr_nlg(np.diag([3.0, 1.0]), reg.RegConfig(k_frac=1.0, alpha=0.1)), -1.1, 1e-12),
    ]
    assert reg.RegConfig(k_frac=1 / 3).k_count((3, 3)) == 1
    assert reg.RegConfig(k_frac=1.0).k_count((2, 2)) == 2
    bad = []
    for name, node, expected, tol in cases:
        if abs(float(node.value) - expected) > tol:
            bad.append(f"{name}={float(node.value)!r}")
    c.note(f"{len(cases) - len(bad)}/{len(cases)} match")
    assert not bad, bad


@pytest.mark.parametrize("task_mode", ["NLU", "NLG"])
@pytest.mark.parametrize("ba_init,plain", [("pissa", "PiSSA"), ("lora", "LoRA")])
def test_zero_lambda_degeneracy(criterion, task_mode, ba_init, plain):
    c = criterion(5, "BA-LoRA with zero weights follows the plain trajectory (100 steps, 1e-12)")
    mcfg = ex.ModelConfig(ba_init=ba_init)
    dcfg = ex.DataConfig(pretrain_epochs=5)
    ocfg = OptimConfig(lr=5e-3, batch_size=128 if task_mode == "NLU" else 16, epochs=13, seed=5)
    rcfg = reg.RegConfig.defaults(task_mode).with_lambdas(0.0, 0.0, 0.0)
    master = ex.seed_master(ocfg.seed, 0)
    splits = ex.make_splits(task_mode, CorruptionSpec(label_noise_rate=0.2), mcfg, dcfg, master)
    pre = ex.build_pretrained(task_mode, mcfg, dcfg, splits.pretrain, master)

    def run(method):
        pair = ex.prepare_pair(pre, method, task_mode, mcfg, master)
        steps = []
        ex.finetune(pair, method, task_mode, splits.train, ocfg, rcfg, master + ex.SEED_SHUFFLE,
                    on_step=lambda s, p: steps.append({k: v.copy() for k, v in p.items()}))
        return steps

    a, b = run("BA-LoRA"), run(plain)
    assert len(a) == len(b) >= 100
    worst = max(float(np.max(np.abs(pa[k] - pb[k]))) for pa, pb in zip(a[:100], b[:100]) for k in pa)
    c.note(f"{task_mode}/{plain}: max|dtheta|={worst:.1e}")
    assert worst <= 1e-12


def test_noise_mitigation(criterion):
    c = criterion(6, "BA-LoRA mean OOD accuracy >= LoRA (MLP, 20% noise, 10 seeds)", budget_s=600)
    # Fixed before any results were seen; not to be tuned against the outcome.
    ocfg = OptimConfig(lr=5e-3, batch_size=128, epochs=20, seed=0)
    rcfg = reg.RegConfig.defaults("NLU")
    corruption = CorruptionSpec(label_noise_rate=0.2)
    cache = ex.PretrainCache()
    ba = ex.run_experiment("BA-LoRA", "NLU", corruption, ocfg, rcfg, 10, cache=cache, threads=1)
    lora = ex.run_experiment("LoRA", "NLU", corruption, ocfg, rcfg, 10, cache=cache, threads=1)
    ood = ex.paired_gap(ba, lora, "ood_accuracy")
    id_gap = ex.paired_gap(ba, lora, "id_accuracy")
    ARTIFACTS.mkdir(exist_ok=True)
    payload = {
        "ood_gap": ood,
        "id_gap": id_gap,
        "reports": json.loads(ex.reports_json([ba, lora]))["reports"],
    }
    (ARTIFACTS / "noise_mitigation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    c.note(f"OOD gap {ood['mean']:+.4f}±{ood['std']:.4f} ({ood['wins']}W/{ood['losses']}L); ID gap {id_gap['mean']:+.4f}")
    c.check_budget()
    assert ood["mean"] >= 0.0


def test_quantization_error_ordering(criterion):
    c = criterion(7, "NF4 error of rank-8 PiSSA residual below that of W (>= 18/20)", budget_s=120)
    wins, ratios = 0, []
    s = np.arange(1, 129, dtype=np.float64) ** -2.0
    for trial in range(20):
        rng = np.random.default_rng(700 + trial)
        u, _ = np.linalg.qr(rng.standard_normal((128, 128)))
        v, _ = np.linalg.qr(rng.standard_normal((128, 128)))
        w = (u * s) @ v.T
        e_w = adapters.quant_error(w)
        e_res = adapters.quant_error(adapters.pissa_init(w, 8).base)
        wins += e_res < e_w
        ratios.append(e_res / e_w)
    c.note(f"{wins}/20, median ratio={np.median(ratios):.3f}")
    assert wins >= 18
    c.check_budget()


def test_svd_kernel(criterion):
    c = criterion(8, "Jacobi SVD on 500 matrices up to 32x32 (1e-10)", budget_s=30)
    rng = np.random.default_rng(8)
    worst_rec = worst_orth = 0.0
    for _ in range(500):
        m, n = rng.integers(1, 33, size=2)
        a = rng.standard_normal((m, n))
        f = linalg.svd(a)
        p = min(m, n)
        worst_rec = max(worst_rec, np.linalg.norm(f.reconstruct() - a) / np.linalg.norm(a))
        worst_orth = max(
            worst_orth,
            np.max(np.abs(f.u.T @ f.u - np.eye(p))),
            np.max(np.abs(f.v.T @ f.v - np.eye(p))),
        )
        assert np.all(np.diff(f.s) <= 0)
        pivots = np.argmax(np.abs(f.u), axis=0)
        assert np.all(f.u[pivots, np.arange(p)] >= 0)
        g = linalg.svd(a.copy())
        assert np.array_equal(f.u, g.u) and np.array_equal(f.s, g.s) and np.array_equal(f.v, g.v)
    c.note(f"rec={worst_rec:.1e} orth={worst_orth:.1e}")
    assert worst_rec <= 1e-10 and worst_orth <= 1e-10
    c.check_budget()


@pytest.mark.parametrize("task_mode", ["NLU", "NLG"])
def test_train_reproducibility(criterion, tmp_path, task_mode):
    c = criterion(9, "repeated train runs give byte-identical JSON reports")
    cfg = {
        "experiment": {"methods": ["LoRA", "PiSSA", "BA-LoRA"], "task_mode": task_mode},
        "optim": {"lr": 0.005, "epochs": 2, "batch_size": 128 if task_mode == "NLU" else 16},
        "data": {"pretrain_epochs": 3},
        "corruption": [{"label_noise_rate": 0.2, "seed": 1}, {"label_noise_rate": 0.0}],
        "seeds": {"base": 42, "n": 2},
    }
    cfg["paths"] = {"report_json": str(tmp_path / "r.json"), "report_csv": str(tmp_path / "r.csv")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    blobs = []
    for _ in range(2):
        assert main(["train", "--config", str(path)]) == 0
        blobs.append(((tmp_path / "r.json").read_bytes(), (tmp_path / "r.csv").read_bytes()))
    c.note(f"{task_mode}: {len(blobs[0][0])} bytes")
    assert blobs[0] == blobs[1]
