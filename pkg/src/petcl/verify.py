"""Runtime self-checks for the numerical identities the trainer relies on.

Each check builds its own small random instances, measures the worst
deviation, and reports a one-line verdict.  ``run_checks`` drives the full
battery; the CLI ``verify`` subcommand prints the results and exits nonzero
if any check fails.  ``inject_lambda_bug`` deliberately swaps the calibrated
gradient path for the plain one inside the compensation check, which must
make that check fail — it exists to prove the check can catch the mistake
it is written for.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .continual import combine_expert_probs, ema_update, masked_local_ce
from .model import BackboneConfig, ClassifierHead, grow_head, head_forward
from .pet import (
    PrefixParams,
    build_pet_set,
    calibrated_prefix_attention,
    pet_flatten,
    prefix_as_adapter_form,
    prefix_attention,
    prefix_lambda,
)
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    elapsed: float

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"[{verdict}] {self.name}: {self.detail} ({self.elapsed:.2f}s)"


def _timed(fn):
    start = time.perf_counter()
    passed, detail = fn()
    return passed, detail, time.perf_counter() - start


def _random_prefix_instance(gen, max_dim=16, max_prefix=4, max_tokens=8):
    dim = 2 * int(gen.integers(1, max_dim // 2 + 1))
    heads = int(gen.choice([h for h in (1, 2, 4) if dim % h == 0]))
    length = int(gen.integers(1, max_prefix + 1))
    tokens = int(gen.integers(1, max_tokens + 1))
    e = gen.normal(0.0, 0.5, size=(tokens, dim))
    wq, wk, wv = (Tensor(gen.normal(0.0, 0.5, size=(dim, dim))) for _ in range(3))
    p = PrefixParams(
        Tensor(gen.normal(0.0, 0.5, size=(length, dim))),
        Tensor(gen.normal(0.0, 0.5, size=(length, dim))),
        Tensor(np.asarray(1.0)), Tensor(np.asarray(1.0)),
        compensate=False, learnable_scales=False)
    return p, e, wq, wk, wv, heads


def check_prefix_form_equivalence(instances: int = 100, seed: int = 0,
                                  tol: float = 1e-8) -> CheckResult:
    """Key/value-concat attention equals its gated two-term rewrite."""
    def body():
        gen = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(instances):
            p, e, wq, wk, wv, heads = _random_prefix_instance(gen)
            concat_route = prefix_attention(p, Tensor(e), wq, wk, wv, heads).data
            mixture_route = prefix_as_adapter_form(p, Tensor(e), wq, wk, wv, heads).data
            worst = max(worst, float(np.abs(concat_route - mixture_route).max()))
        return worst < tol, f"{instances} instances, worst |diff| {worst:.3e} (tol {tol:.0e})"

    passed, detail, elapsed = _timed(body)
    return CheckResult("prefix-form-equivalence", passed, detail, elapsed)


def check_gate_mass_identity(instances: int = 50, seed: int = 1,
                             tol: float = 1e-12) -> CheckResult:
    """The gate equals the attention mass landing on the prefix columns."""
    def body():
        gen = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(instances):
            p, e, wq, wk, _, heads = _random_prefix_instance(gen)
            gate = prefix_lambda(p, Tensor(e), wq, wk, heads).data
            tokens, dim = e.shape
            hd = dim // heads
            q = e @ wq.data
            k_full = np.vstack([p.p_k.data, e @ wk.data])
            for h in range(heads):
                sl = slice(h * hd, (h + 1) * hd)
                logits = q[:, sl] @ k_full[:, sl].T / np.sqrt(hd)
                logits -= logits.max(axis=1, keepdims=True)
                probs = np.exp(logits)
                probs /= probs.sum(axis=1, keepdims=True)
                mass = probs[:, : p.p_k.data.shape[0]].sum(axis=1)
                worst = max(worst, float(np.abs(gate[h] - mass).max()))
        return worst < tol, f"{instances} instances, worst |diff| {worst:.3e} (tol {tol:.0e})"

    passed, detail, elapsed = _timed(body)
    return CheckResult("gate-mass-identity", passed, detail, elapsed)


def _value_gradient_norm(p: PrefixParams, e, wq, wk, wv, readout, reparam: bool):
    p.p_v.requires_grad = True
    p.p_v.grad = None
    fn = calibrated_prefix_attention if reparam else prefix_attention
    out = fn(p, Tensor(e), wq, wk, wv, 1)
    T.reduce_sum(T.mul(out, Tensor(readout))).backward()
    return float(np.linalg.norm(p.p_v.grad))


def check_gradient_compensation(seed: int = 2, rel_tol: float = 0.2,
                                inject_lambda_bug: bool = False) -> CheckResult:
    """Calibration must rescale the value gradient by one over the mean gate.

    Three settings sweep prefix length, token count, and how strongly the
    prefix keys attract the queries, so the mean gate spans a wide range.
    In every setting the calibrated-to-plain gradient norm ratio has to sit
    within ``rel_tol`` of the reciprocal mean gate, and the plain path's
    attenuation has to grow with the gate.
    """
    def body():
        gen = np.random.default_rng(seed)
        dim = 8
        settings = [(1, 4, -2.0), (2, 6, 0.0), (4, 8, 2.0)]
        gates, attenuations, lines = [], [], []
        ok = True
        for length, tokens, align in settings:
            e = gen.normal(0.0, 0.5, size=(tokens, dim))
            wq, wk, wv = (Tensor(gen.normal(0.0, 0.5, size=(dim, dim)))
                          for _ in range(3))
            q_mean = (e @ wq.data).mean(axis=0)
            q_hat = q_mean / np.linalg.norm(q_mean)
            p_k = gen.normal(0.0, 0.5, size=(length, dim)) + align * np.sqrt(dim) * q_hat
            p_v = gen.normal(0.0, 0.5, size=(length, dim))
            readout = gen.normal(size=(tokens, dim))

            plain = PrefixParams(Tensor(p_k.copy()), Tensor(p_v.copy()),
                                 Tensor(np.asarray(1.0)), Tensor(np.asarray(1.0)),
                                 compensate=False, learnable_scales=False)
            calibrated = PrefixParams(Tensor(p_k.copy()), Tensor(p_v.copy()),
                                      Tensor(np.asarray(1.0)), Tensor(np.asarray(1.0)),
                                      compensate=not inject_lambda_bug,
                                      learnable_scales=True)
            gate_mean = float(prefix_lambda(plain, Tensor(e), wq, wk, 1).data.mean())
            g_plain = _value_gradient_norm(plain, e, wq, wk, wv, readout, reparam=False)
            g_cal = _value_gradient_norm(calibrated, e, wq, wk, wv, readout, reparam=True)
            ratio = g_cal / g_plain
            gates.append(gate_mean)
            attenuations.append(1.0 / ratio)
            within = abs(ratio * gate_mean - 1.0) < rel_tol
            ok = ok and within
            lines.append(f"l={length},T={tokens}: gate {gate_mean:.3f}, "
                         f"ratio {ratio:.2f} (want ~{1 / gate_mean:.2f})")
        order = np.argsort(gates)
        monotone = all(attenuations[order[i]] < attenuations[order[i + 1]]
                       for i in range(len(order) - 1))
        ok = ok and monotone
        return ok, "; ".join(lines) + f"; attenuation monotone in gate: {monotone}"

    passed, detail, elapsed = _timed(body)
    return CheckResult("gradient-compensation", passed, detail, elapsed)


def check_ema_closed_form(steps: int = 1000, alpha: float = 0.9999,
                          tol: float = 1e-9, seed: int = 3) -> CheckResult:
    """Repeated averaging against a fixed target matches its closed form."""
    def body():
        cfg = BackboneConfig(depth=2, model_dim=8, heads=2, mlp_ratio=2,
                             input_tokens=2, patch_dim=2)
        gen = np.random.default_rng(seed)
        online = build_pet_set("adapter", 2, cfg, gen)
        for _, param in online.named_params():
            param.data = gen.normal(size=param.data.shape)
        offline = online.clone(trainable=False)
        for _, param in offline.named_params():
            param.data = param.data + gen.normal(size=param.data.shape)

        theta, _ = pet_flatten(online)
        start, _ = pet_flatten(offline)
        for _ in range(steps):
            ema_update(offline, online, alpha)
        final, _ = pet_flatten(offline)
        expected = theta + alpha ** steps * (start - theta)
        worst = float(np.abs(final - expected).max())
        return worst < tol, (f"{steps} steps at alpha={alpha}: worst |diff| "
                             f"{worst:.3e} (tol {tol:.0e})")

    passed, detail, elapsed = _timed(body)
    return CheckResult("ema-closed-form", passed, detail, elapsed)


def check_masked_loss_isolation(seed: int = 4) -> CheckResult:
    """The local loss must send exactly zero gradient to earlier classes."""
    def body():
        gen = np.random.default_rng(seed)
        feat_dim, batch = 8, 6
        head = ClassifierHead(feat_dim)
        grow_head(head, 4, gen)
        grow_head(head, 4, gen)
        for _, param in head.named_params():
            param.requires_grad = True  # expose even frozen blocks to the tape
        features = Tensor(gen.normal(size=(batch, feat_dim)))
        logits = head_forward(head, features)
        targets = gen.integers(4, 8, size=batch)
        loss = masked_local_ce(logits, targets, (4, 8))
        loss.backward()
        old_w, old_b = head.blocks[0]
        logit_leak = int(np.count_nonzero(logits.grad[:, :4]))
        w_leak = int(np.count_nonzero(old_w.grad))
        b_leak = int(np.count_nonzero(old_b.grad))
        new_has_signal = np.count_nonzero(head.blocks[1][0].grad) > 0
        ok = logit_leak == 0 and w_leak == 0 and b_leak == 0 and new_has_signal
        return ok, (f"old-class leaks: logits {logit_leak}, weights {w_leak}, "
                    f"biases {b_leak}; new-class gradient present: {new_has_signal}")

    passed, detail, elapsed = _timed(body)
    return CheckResult("masked-loss-isolation", passed, detail, elapsed)


def check_ensemble_rule(samples: int = 200, classes: int = 7,
                        seed: int = 5) -> CheckResult:
    """Ensemble picks match brute force over every (expert, class) pair."""
    def body():
        gen = np.random.default_rng(seed)

        def rows(n):
            z = gen.normal(size=(n, classes))
            ez = np.exp(z - z.max(axis=1, keepdims=True))
            return ez / ez.sum(axis=1, keepdims=True)

        p_on, p_off = rows(samples), rows(samples)
        # force exact cross-expert ties on the last rows
        p_on[-1, :] = p_off[-1, :] = 1.0 / classes
        p_on[-2, 2] = p_off[-2, 5] = 0.9

        picks = np.argmax(combine_expert_probs(p_on, p_off), axis=1)
        mismatches = 0
        for i in range(samples):
            best = max(p_on[i].max(), p_off[i].max())
            winners = [c for c in range(classes)
                       if p_on[i, c] == best or p_off[i, c] == best]
            if picks[i] != min(winners):
                mismatches += 1
        solo = np.argmax(combine_expert_probs(p_on, None), axis=1)
        degenerate_ok = bool(np.array_equal(solo, np.argmax(p_on, axis=1)))
        tie_ok = picks[-1] == 0 and picks[-2] == 2
        ok = mismatches == 0 and degenerate_ok and tie_ok
        return ok, (f"{samples} samples: {mismatches} mismatches; single-expert "
                    f"fallback ok: {degenerate_ok}; lowest-index ties ok: {tie_ok}")

    passed, detail, elapsed = _timed(body)
    return CheckResult("ensemble-rule", passed, detail, elapsed)


def check_finite_difference_gradients(seed: int = 6, tol: float = 1e-4,
                                      h: float = 1e-5) -> CheckResult:
    """Spot-check engine gradients on composite graphs by central differences."""
    def body():
        gen = np.random.default_rng(seed)

        def fd(fn, x):
            g = np.zeros_like(x)
            it = np.nditer(x, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = x[idx]
                x[idx] = orig + h
                hi = fn(x)
                x[idx] = orig - h
                lo = fn(x)
                x[idx] = orig
                g[idx] = (hi - lo) / (2 * h)
                it.iternext()
            return g

        def compare(name, build, x0):
            t = Tensor(x0.copy(), requires_grad=True)
            build(t).backward()
            numeric = fd(lambda arr: build(Tensor(arr.copy())).item(), x0)
            denom = np.maximum(np.maximum(np.abs(t.grad), np.abs(numeric)), 1e-8)
            return name, float((np.abs(t.grad - numeric) / denom).max())

        w = Tensor(gen.normal(0.0, 0.5, size=(6, 6)))
        r1 = Tensor(gen.normal(size=(4, 6)))
        gamma = Tensor(gen.normal(1.0, 0.1, size=(6,)))
        beta = Tensor(gen.normal(0.0, 0.1, size=(6,)))
        targets = np.array([0, 2, 1, 4])
        cases = [
            compare("gelu-chain",
                    lambda t: T.reduce_sum(T.mul(T.gelu(T.matmul(t, w)), r1)),
                    gen.normal(size=(4, 6))),
            compare("norm-attn",
                    lambda t: T.reduce_sum(T.mul(T.multi_head_attention(
                        T.layer_norm(t, gamma, beta), t, t, 2), r1)),
                    gen.normal(size=(4, 6))),
            compare("local-loss",
                    lambda t: T.cross_entropy(T.matmul(t, w), targets),
                    gen.normal(size=(4, 6))),
        ]
        worst = max(err for _, err in cases)
        ok = worst < tol
        joined = ", ".join(f"{name} {err:.2e}" for name, err in cases)
        return ok, f"max rel err {worst:.2e} (tol {tol:.0e}) [{joined}]"

    passed, detail, elapsed = _timed(body)
    return CheckResult("finite-difference-gradients", passed, detail, elapsed)


def run_checks(inject_lambda_bug: bool = False) -> list[CheckResult]:
    return [
        check_prefix_form_equivalence(),
        check_gate_mass_identity(),
        check_gradient_compensation(inject_lambda_bug=inject_lambda_bug),
        check_ema_closed_form(),
        check_masked_loss_isolation(),
        check_ensemble_rule(),
        check_finite_difference_gradients(),
    ]
