"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

The lines are printed as they are produced and repeated in the pytest
terminal summary. Run alone with ``python3 -m pytest tests/test_acceptance.py -v``.
"""

import time
from functools import lru_cache

import numpy as np

from gradharmony import cli, synth
from gradharmony import evaluate as E
from gradharmony import model as M
from gradharmony import trainer as T
from gradharmony.gradcheck import central_differences, max_relative_error
from gradharmony.harmonizer import GammaSchedule, HarmonizerConfig, combine, gamma_at, realign
from gradharmony.linalg import cosine_similarity

from conftest import VERDICTS

SEEDS = (0, 1, 2)


def verdict(tag: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
    VERDICTS.append(line)
    print(line)


# -- 1. gradient oracle ----------------------------------------------------------


def test_c1_gradient_oracle():
    t0 = time.perf_counter()
    worst, worst_plain, n = 0.0, 0.0, 0
    for seed in range(12):
        rng = np.random.default_rng(seed)
        b, k = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        dims = M.ModelDims(dim_video=5, dim_audio=4, dim_text=6,
                           hidden_dim=int(rng.integers(4, 9)), emb_dim_va=3, emb_dim_vt=4)
        p = M.init_params(seed, dims)
        params = p.with_vector(p.vector + 0.1 * rng.standard_normal(p.size))
        batch = M.RawBatch(rng.standard_normal((b, 5)), rng.standard_normal((b, 4)),
                           rng.standard_normal((b, k, 6)))
        for fn in (M.loss_and_grad_va, M.loss_and_grad_vt):
            _, g = fn(params, batch)
            num = central_differences(lambda q: fn(q, batch)[0], params, extrapolate=True)
            worst = max(worst, max_relative_error(g, num))
            plain = central_differences(lambda q: fn(q, batch)[0], params)
            worst_plain = max(worst_plain, max_relative_error(g, plain))
            n += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and n >= 20 and elapsed < 60
    verdict("C1 gradient oracle", ok,
            f"max rel err {worst:.2e} < 1e-6 over {n} instances at tau 0.07 "
            f"(h 1e-5, Richardson; plain h 1e-5: {worst_plain:.2e}), {elapsed:.1f}s < 60s")
    assert ok


# -- 2. projection invariants ----------------------------------------------------


def test_c2_projection_invariants():
    rng = np.random.default_rng(2024)
    worst, n_conflict, failures = 0.0, 0, []
    for i in range(1000):
        dim = int(np.exp(rng.uniform(0, np.log(1e4))))
        a, b = rng.standard_normal(dim), rng.standard_normal(dim)
        if i % 2 and a @ b > 0:
            b = -b  # half the pairs conflict
        ra, rb = realign(a, b)
        if a @ b < 0:
            n_conflict += 1
            for new, other in ((ra, b), (rb, a)):
                bound = np.linalg.norm(new) * np.linalg.norm(other)
                err = abs(new @ other)
                worst = max(worst, err / bound if bound else 0.0)
                if err > 1e-9 * bound:
                    failures.append(i)
        elif not (np.array_equal(ra, a) and np.array_equal(rb, b)):
            failures.append(i)
        if np.linalg.norm(ra) > np.linalg.norm(a) or np.linalg.norm(rb) > np.linalg.norm(b):
            failures.append(i)
    g = rng.standard_normal(5000) * 3
    za, zb = realign(g, -g)
    zeros = not np.any(za) and not np.any(zb)
    ok = not failures and zeros
    verdict("C2 projection invariants", ok,
            f"1000 pairs ({n_conflict} conflicting), worst |g'.h|/(|g'||h|) {worst:.1e} <= 1e-9, "
            f"{len(failures)} violations, anti-parallel -> exact zeros: {zeros}")
    assert ok


# -- 3. dispatch correctness -----------------------------------------------------


def _pair_with_cos(c: float):
    """Two vectors whose computed cosine is exactly ``c``.

    Starts from unit vectors at angle arccos(c) and nudges the second
    coordinate by single ulps until rounding lands on ``c``.
    """
    a = np.array([1.0, 0.0])
    s = np.sqrt(1.0 - c * c)
    candidates = [s]
    up = down = s
    for _ in range(64):
        up, down = np.nextafter(up, 2.0), np.nextafter(down, -1.0)
        candidates += [up, down]
    for y in candidates:
        b = np.array([c, y])
        if cosine_similarity(a, b).value == c:
            return a, b
    raise AssertionError(f"no exact pair for cos {c}")


def test_c3_dispatch():
    schedule = GammaSchedule(-0.3, 0.0, 1000)
    cfg = HarmonizerConfig("both", schedule=schedule)
    eps = 1e-6
    problems = []
    for step in (0, 500, 999):
        gamma = gamma_at(schedule, step)
        sweep = {gamma - eps: "drop", gamma: "drop", gamma + eps: "project",
                 -eps: "project", 0.0: "plain", eps: "plain"}
        for c, want in sweep.items():
            a, b = _pair_with_cos(c)
            d = combine(a, b, cfg, step)
            if d.cos_sim != c:
                problems.append(f"cos {c} computed as {d.cos_sim}")
            if d.action != want:
                problems.append(f"step {step} cos {c}: {d.action} != {want}")
            if want == "project":
                ra, rb = realign(a, b)
                if not np.array_equal(d.combined_grad, ra + rb):
                    problems.append(f"step {step} cos {c}: projected sum differs")
            if want == "plain" and not np.array_equal(d.combined_grad, a + b):
                problems.append(f"step {step} cos {c}: plain sum differs")
    default = HarmonizerConfig().schedule
    ends = (gamma_at(default, 0), gamma_at(default, default.total_steps))
    mid = gamma_at(default, default.total_steps // 2)
    if ends != (-0.3, 0.0) or abs(mid - (-0.15)) > 1e-15:
        problems.append(f"schedule endpoints {ends}, midpoint {mid}")
    ok = not problems
    verdict("C3 dispatch correctness", ok,
            f"18 sweep points drop/project/plain as required; gamma ends {ends}, mid {mid:g}"
            + (f"; problems: {problems[:3]}" if problems else ""))
    assert ok


# -- 4 and 5. indicator separation and conflict prevalence -----------------------

PROBE_DIMS = M.ModelDims(hidden_dim=64, emb_dim_va=32, emb_dim_vt=32)
PROBE_TRAIN, PROBE_SIZE, WARMUP = 2000, 512, 300


@lru_cache(maxsize=None)
def probe_trace(seed: int, p_mis: float):
    """Per-sample cos on a held-out probe set after a 300-step baseline warm-up."""
    data = synth.generate(synth.SynthConfig(n_samples=PROBE_TRAIN + PROBE_SIZE, p_mis_text=p_mis,
                                            noise_std=0.5, seed=seed))
    train, probe = data[:PROBE_TRAIN], data[PROBE_TRAIN:]
    cfg = T.TrainConfig(steps=WARMUP, warmup_steps=100, seed=seed)
    samples, _, _ = T.conflict_trace(M.init_params(seed, PROBE_DIMS), train, probe, cfg, WARMUP)
    return samples


def test_c4_indicator_separation():
    t0 = time.perf_counter()
    reports = [E.separation(probe_trace(s, 0.5)) for s in SEEDS]
    elapsed = time.perf_counter() - t0
    ok = (all(r.auc > 0.6 and r.mean_cos_aligned > r.mean_cos_misaligned for r in reports)
          and elapsed < 300)
    detail = ", ".join(f"seed {s}: auc {r.auc:.3f} mean {r.mean_cos_aligned:+.3f} vs "
                       f"{r.mean_cos_misaligned:+.3f}" for s, r in zip(SEEDS, reports))
    verdict("C4 indicator separation", ok, f"{detail}; {elapsed:.0f}s < 300s")
    assert ok


def negative_fraction(samples) -> float:
    return float(np.mean([s.cos < 0 for s in samples]))


def test_c5_conflict_prevalence():
    high = [negative_fraction(probe_trace(s, 0.5)) for s in SEEDS]
    low = [negative_fraction(probe_trace(s, 0.05)) for s in SEEDS]
    ok = all(0.3 <= h <= 0.7 and h > l for h, l in zip(high, low))
    detail = ", ".join(f"seed {s}: {h:.3f} (p=0.05: {l:.3f})" for s, h, l in zip(SEEDS, high, low))
    verdict("C5 conflict prevalence", ok, f"negative-cos fraction at p=0.5 in [0.3, 0.7]; {detail}")
    assert ok


# -- 6. end-to-end directional gain ----------------------------------------------

E2E_STEPS = 2000


def e2e_modes():
    def sched(start):
        return GammaSchedule(start, 0.0, E2E_STEPS)

    return {
        "baseline": HarmonizerConfig("baseline", granularity="per_sample"),
        "both": HarmonizerConfig("both", schedule=sched(-0.3), granularity="per_sample"),
        "cl(-0.3,0)": HarmonizerConfig("curriculum", schedule=sched(-0.3), granularity="per_sample"),
        "cl(0,0)": HarmonizerConfig("curriculum", schedule=sched(0.0), granularity="per_sample"),
    }


def test_c6_end_to_end_gain():
    t0 = time.perf_counter()
    dims = M.ModelDims(hidden_dim=32, emb_dim_va=16, emb_dim_vt=16)
    results = {m: [] for m in e2e_modes()}
    pools = []
    for seed in SEEDS:
        data = synth.generate(synth.SynthConfig(n_samples=4000, p_mis_text=0.5, noise_std=0.5,
                                                seed=seed))
        train, clean = synth.split(data, (0.75, 0.25), seed)
        pools.append(len(clean))
        init = M.init_params(seed, dims)
        for mode, h in e2e_modes().items():
            cfg = T.TrainConfig(steps=E2E_STEPS, warmup_steps=100, seed=seed, harmonizer=h)
            params, _ = T.train(init, train, cfg)
            r = E.retrieval_eval(params, clean, ks=(10,))
            results[mode].append((r.median_rank, r.recall_at_k[10]))
    elapsed = time.perf_counter() - t0
    mean = {m: np.mean(v, axis=0) for m, v in results.items()}
    both_ok = (mean["both"][0] <= mean["baseline"][0]) and (mean["both"][1] >= mean["baseline"][1])
    cl_ok = mean["cl(-0.3,0)"][0] < mean["cl(0,0)"][0]
    ok = both_ok and cl_ok and min(pools) >= 200 and elapsed < 900
    detail = "; ".join(f"{m} MdR {v[0]:.2f} R@10 {v[1]:.3f}" for m, v in mean.items())
    verdict("C6 end-to-end gain", ok,
            f"{detail}; pools {pools}; {elapsed:.0f}s < 900s")
    assert ok


# -- 7. determinism ---------------------------------------------------------------

DET_CONFIG = """\
seed = 11
n_samples = 300
latent_dim = 4
dim_video = 6
dim_audio = 5
dim_text = 7
k_neighbors = 3
hidden_dim = 8
emb_dim_va = 4
emb_dim_vt = 4
p_mis_text = 0.5
steps = 40
warmup_steps = 4
batch_size = 16
learning_rate = 0.01
mode = both
granularity = {granularity}
checkpoint_every = 20
probe_steps = 10
probe_size = 80
"""


def _run_all(root, cfg):
    data = root / "data.bin"
    run, ev, dg = root / "run", root / "eval", root / "diag"
    codes = [
        cli.main(["gen-data", "--config", str(cfg), "--out", str(data)]),
        cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]),
        cli.main(["eval", "--config", str(cfg), "--data", str(data),
                  "--checkpoint", str(run / "checkpoint.bin"), "--out", str(ev)]),
        cli.main(["diagnose", "--config", str(cfg), "--data", str(data),
                  "--checkpoint", str(run / "checkpoint.bin"), "--out", str(dg)]),
    ]
    files = {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
             if p.is_file()}
    return codes, files


def test_c7_determinism(tmp_path):
    problems, n_files = [], 0
    for gran in ("microbatch", "per_sample"):
        cfg = tmp_path / f"{gran}.txt"
        cfg.write_text(DET_CONFIG.format(granularity=gran))
        first, second = tmp_path / gran / "a", tmp_path / gran / "b"
        first.mkdir(parents=True)
        second.mkdir(parents=True)
        codes_a, files_a = _run_all(first, cfg)
        codes_b, files_b = _run_all(second, cfg)
        if codes_a != [0] * 4 or codes_b != [0] * 4:
            problems.append(f"{gran}: exit codes {codes_a} {codes_b}")
        if files_a.keys() != files_b.keys():
            problems.append(f"{gran}: file sets differ")
        problems += [f"{gran}: {name}" for name in files_a if files_a[name] != files_b.get(name)]
        n_files += len(files_a)
    ok = not problems
    verdict("C7 determinism", ok,
            f"{n_files} output files from gen-data/train/eval/diagnose byte-identical on rerun"
            + (f"; differing: {problems}" if problems else ""))
    assert ok


# -- 8. metric oracles ------------------------------------------------------------


def brute_ranks(scores):
    n = scores.shape[0]
    out = np.empty(n, dtype=int)
    for i in range(n):
        order = sorted(range(scores.shape[1]), key=lambda j: (-scores[i, j], j))
        out[i] = order.index(i) + 1
    return out


def brute_auc(cos, aligned):
    pos, neg = cos[aligned], cos[~aligned]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_c8_metric_oracles():
    rng = np.random.default_rng(8)
    problems = []
    for n in (1, 2, 7, 64, 333, 1000):
        for coarse in (False, True):
            q = rng.integers(-2, 3, (n, 3)).astype(float) if coarse else rng.standard_normal((n, 8))
            c = rng.integers(-2, 3, (n, 3)).astype(float) if coarse else rng.standard_normal((n, 8))
            ranks = brute_ranks(q @ c.T)
            ks = (1, 5, 10, n)
            rep = E.retrieval_from_embeddings(q, c, ks=ks)
            if rep.median_rank != float(np.median(ranks)):
                problems.append(f"median n={n}")
            for k in ks:
                if rep.recall_at_k[k] != float(np.mean(ranks <= k)):
                    problems.append(f"R@{k} n={n}")
            if n >= 2:
                cos = np.round(rng.uniform(-1, 1, n), 1 if coarse else 6)
                aligned = rng.random(n) < 0.5
                aligned[0], aligned[-1] = True, False
                trace = list(zip(cos, aligned))
                if E.separation(trace).auc != brute_auc(cos, aligned):
                    problems.append(f"auc n={n}")
    ok = not problems
    verdict("C8 metric oracles", ok,
            "median rank, R@K and AUC equal brute-force oracles exactly for n up to 1000"
            + (f"; mismatches: {problems}" if problems else ""))
    assert ok
