"""Built-in verification battery: gradient checks for every op, block,
network, and loss; channel statistics; and the digital-chain oracles.

The CLI's grad-check and self-test commands run these; the acceptance suite
runs the same battery at full sample counts.  ``inject_grad_fault`` corrupts
one backward rule on purpose so the fault path of the battery is testable.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from semlink import autodiff as ad
from semlink import channel as ch
from semlink import evalharness as ev
from semlink import losses as ls
from semlink import models as md
from semlink import nn
from semlink.autodiff import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _result(name: str, passed: bool, detail: str = "") -> CheckResult:
    return CheckResult(name=name, passed=bool(passed), detail=detail)


# ---------------------------------------------------------------------------
# op battery
# ---------------------------------------------------------------------------


def _op_cases(rng: np.random.Generator):
    """Scalar-valued probes per op kind; inputs stay clear of kinks and
    vanishing-gradient regions so the relative-error floor stays meaningful."""
    w1 = rng.normal(size=(3, 2, 4))
    w2 = rng.normal(size=(3, 3, 2, 3))
    wmix = rng.normal(size=(4, 3))
    idx = np.array([0, 2, 1, 2])
    mask = rng.random((3, 4)) < 0.3
    cond = rng.random((3, 4)) < 0.5
    st_offset = rng.normal(size=12)
    return {
        "matmul": lambda x: ad.matmul(ad.reshape(x, (3, 4)), ad.transpose(ad.reshape(x, (3, 4)))),
        "add": lambda x: ad.add(ad.reshape(x, (3, 4)), ad.square(ad.reshape(x, (3, 4)))),
        "sub": lambda x: ad.sub(ad.reshape(x, (3, 4)), ad.square(ad.reshape(x, (3, 4)))),
        "mul": lambda x: ad.mul(ad.reshape(x, (3, 4)), ad.reshape(x, (3, 4))),
        "div": lambda x: ad.div(ad.Tensor(np.ones((3, 4))),
                                ad.add(ad.square(ad.reshape(x, (3, 4))), ad.Tensor(1.0))),
        "conv1d": lambda x: ad.conv1d(ad.reshape(x, (6, 2)), ad.Tensor(w1), stride=2),
        "conv2d": lambda x: ad.conv2d(ad.reshape(x, (2, 3, 2)), ad.Tensor(w2), stride=1),
        "layernorm": lambda x: ad.matmul(ad.layernorm(ad.reshape(x, (3, 4))), ad.Tensor(wmix)),
        "softmax": lambda x: ad.softmax(ad.reshape(x, (3, 4))),
        "log": lambda x: ad.log(ad.add(ad.square(x), ad.Tensor(0.5))),
        "exp": lambda x: ad.exp(x),
        "sqrt": lambda x: ad.sqrt(ad.add(ad.square(x), ad.Tensor(0.5))),
        "gelu": lambda x: ad.gelu(x),
        "relu": lambda x: ad.relu(x),
        "sigmoid": lambda x: ad.sigmoid(x),
        "gather": lambda x: ad.gather(ad.reshape(x, (3, 4)), idx),
        "concat": lambda x: ad.concat([ad.reshape(x, (3, 4)), ad.square(ad.reshape(x, (3, 4)))], axis=1),
        "slice": lambda x: ad.slice_axis(ad.reshape(x, (3, 4)), 1, 1, 3),
        "transpose": lambda x: ad.transpose(ad.reshape(x, (3, 4))),
        "mean": lambda x: ad.mean(ad.reshape(x, (3, 4)), axis=1),
        "sum": lambda x: ad.sum_(ad.reshape(x, (3, 4)), axis=0),
        "square": lambda x: ad.square(x),
        "masked_fill": lambda x: ad.masked_fill(ad.reshape(x, (3, 4)), mask, -0.75),
        "expand": lambda x: ad.expand(ad.reshape(x, (1, 12)), (4, 12)),
        "reshape": lambda x: ad.reshape(x, (4, 3)),
        "where": lambda x: ad.where(cond, ad.reshape(x, (3, 4)), ad.square(ad.reshape(x, (3, 4)))),
        # values ride on the input (channel-transit semantics), so identity is
        # the exact derivative of the emitted values
        "straight_through": lambda x: ad.straight_through(x, x.data + st_offset),
    }


def op_gradient_battery(points_per_op: int = 100, tol: float = 1e-4,
                        seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for kind, case in sorted(_op_cases(rng).items()):
        worst = 0.0
        ok = True
        for _ in range(points_per_op):
            raw = rng.uniform(-1.5, 1.5, size=12)
            point = Tensor(np.where(np.abs(raw) < 0.05, 0.05, raw))
            report = ad.grad_check(lambda z: ad.mean(ad.square(case(z))), point, tol=tol)
            worst = max(worst, report.max_rel_err)
            ok = ok and report.passed
        results.append(_result(f"op/{kind}", ok and worst <= tol,
                               f"max rel err {worst:.2e} over {points_per_op} points"))
    return results


# ---------------------------------------------------------------------------
# block and network batteries
# ---------------------------------------------------------------------------

_CHECK_CFG = md.SemanticPipelineConfig()


def _network_check(which: str, loss_builder, stores_for, points: int, coords: int,
                   tol: float, seed: int) -> CheckResult:
    worst = 0.0
    ok = True
    checked = 0
    for p in range(points):
        rng = np.random.default_rng(np.random.SeedSequence((seed, ch.stable_tag(which), p)))
        stores = stores_for(p)
        nn.jitter_params(stores, rng)
        loss_fn = loss_builder(stores, rng)
        report = nn.grad_check_params(loss_fn, stores, max_coords=coords, tol=tol, rng=rng)
        worst = max(worst, report.max_rel_err)
        checked += report.n_coords
        ok = ok and report.passed
    return _result(f"network/{which}", ok,
                   f"max rel err {worst:.2e} over {checked} coordinates")


def block_gradient_battery(points: int = 2, coords: int = 60, tol: float = 1e-4,
                           seed: int = 0) -> list[CheckResult]:
    cfg = _CHECK_CFG
    results = []

    dense_spec = nn.LayerSpec(name="d", kind="dense", width_in=24, width_out=24,
                              activation="gelu")
    tb_spec = nn.LayerSpec(name="t", kind="transformer", width_in=cfg.model_width,
                           width_out=cfg.model_width, heads=cfg.heads, ff_width=cfg.ff_width)
    db_spec = nn.LayerSpec(name="db", kind="decoder_block", width_in=cfg.model_width,
                           width_out=cfg.model_width, heads=cfg.heads, ff_width=cfg.ff_width,
                           memory_width=cfg.feature_width)

    def check_block(name, spec, forward):
        def stores_for(p):
            return [nn.init_params([spec], seed + p)]

        def loss_builder(stores, rng):
            if spec.kind == "dense":
                x = Tensor(rng.normal(size=(5, spec.width_in)))
                return lambda: ad.mean(ad.square(forward(spec, stores[0], x)))
            x = Tensor(rng.normal(size=(6, cfg.model_width)))
            if spec.kind == "decoder_block":
                memory = Tensor(rng.normal(size=(4, cfg.feature_width)))
                return lambda: ad.mean(ad.square(
                    forward(spec, stores[0], x, memory, nn.causal_mask(6))))
            return lambda: ad.mean(ad.square(forward(spec, stores[0], x, nn.causal_mask(6))))

        results.append(_network_check(name, loss_builder, stores_for, points, coords, tol, seed))

    check_block("block_dense", dense_spec, nn.dense_forward)
    check_block("block_transformer", tb_spec, nn.transformer_block_forward)
    check_block("block_decoder", db_spec, nn.decoder_block_forward)
    return results


def network_gradient_battery(points: int = 2, coords: int = 60, tol: float = 1e-4,
                             seed: int = 0) -> list[CheckResult]:
    cfg = _CHECK_CFG
    results = []
    frames = np.random.default_rng(seed).normal(size=(3 * cfg.frames_per_token, cfg.frame_dim))
    f_shape = (cfg.max_len, cfg.feature_width)
    teacher = np.array([1, 4, 5, 6, 2] + [0] * (cfg.max_len - 5))

    # every builder freezes its input once; loss_fn must be re-evaluable
    def build_encoder(s, rng):
        return lambda: ad.mean(ad.square(md.deep_semantic_encode(cfg, s[0], frames)))

    def build_codec_enc(s, rng):
        f = Tensor(rng.normal(size=f_shape))
        return lambda: ad.mean(ad.square(md.channel_encode(cfg, s[0], f)))

    def build_codec_dec(s, rng):
        y = Tensor(rng.normal(size=(cfg.max_len, cfg.symbol_width)))
        return lambda: ad.mean(ad.square(md.channel_decode(cfg, s[0], y)))

    def build_decoder(s, rng):
        f_hat = Tensor(rng.normal(size=f_shape))
        return lambda: ls.plain_ce(md.decode_teacher(cfg, s[0], f_hat, teacher), teacher[1:])

    def build_generator(s, rng):
        return lambda: ad.mean(ad.square(md.generator_forward(cfg, s[0], frames)[0]))

    def build_discriminator(s, rng):
        f = Tensor(rng.normal(size=f_shape))
        return lambda: ad.square(md.discriminate(cfg, s[0], f))

    def build_probe(s, rng):
        inter = Tensor(rng.normal(size=(cfg.max_len, cfg.model_width)))
        return lambda: ad.sum_(ad.square(md.probe_forward(cfg, s[0], inter)))

    def build_compensator(s, rng):
        f = Tensor(rng.normal(size=f_shape))
        probe = np.tile([1, 0], cfg.max_len // 2)
        return lambda: ad.mean(ad.square(md.probe_compensate(cfg, s[0], f, probe)))

    cases = {
        "encoder": build_encoder,
        "codec_enc": build_codec_enc,
        "codec_dec": build_codec_dec,
        "decoder": build_decoder,
        "generator": build_generator,
        "discriminator": build_discriminator,
        "probe": build_probe,
        "compensator": build_compensator,
    }
    for which, builder in cases.items():
        def stores_for(p, which=which):
            return [md.init_network(cfg, which, seed + 31 * p)]
        results.append(_network_check(which, builder, stores_for, points, coords, tol, seed))
    return results


def loss_gradient_battery(points: int = 100, tol: float = 1e-4, seed: int = 0,
                          ) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def run(name, build):
        worst = 0.0
        ok = True
        for _ in range(points):
            fn, point = build()
            report = ad.grad_check(fn, point, tol=tol)
            worst = max(worst, report.max_rel_err)
            ok = ok and report.passed
        results.append(_result(f"loss/{name}", ok,
                               f"max rel err {worst:.2e} over {points} points"))

    for rule in ("paper-literal", "standard"):
        cfg = ls.LossConfig(smoothing_mass_rule=rule)

        def build(cfg=cfg):
            targets = [4, 3, 2]
            point = Tensor(rng.normal(size=15))
            return (lambda x: ls.lsr_ce(ad.softmax(ad.reshape(x, (3, 5))), targets, cfg)), point

        run(f"lsr_ce[{rule}]", build)

    def build_disc():
        point = Tensor(rng.normal(size=2))
        def fn(x):
            s = ad.sigmoid(x)
            return ls.disc_loss(ad.reshape(ad.slice_axis(s, 0, 0, 1), ()),
                                ad.reshape(ad.slice_axis(s, 0, 1, 2), ()))
        return fn, point

    run("disc", build_disc)

    def build_gen():
        f_real = Tensor(rng.normal(size=(2, 3)))
        point = Tensor(rng.normal(size=7))
        def fn(x):
            f_fake = ad.reshape(ad.slice_axis(x, 0, 0, 6), (2, 3))
            d_fake = ad.sigmoid(ad.reshape(ad.slice_axis(x, 0, 6, 7), ()))
            return ls.gen_loss(f_real, f_fake, d_fake, ls.LossConfig())
        return fn, point

    run("gen", build_gen)

    def build_probe_net():
        i_clean = Tensor(np.abs(rng.normal(size=4)) + 0.5)
        i_comp = Tensor(np.abs(rng.normal(size=4)) + 0.5)
        point = Tensor(rng.normal(size=4))
        return (lambda x: ls.probe_net_loss(i_clean, i_comp, ad.sigmoid(x))), point

    run("probe_net", build_probe_net)

    def build_probe_comp():
        point = Tensor(rng.normal(size=15))
        return (lambda x: ls.probe_comp_loss(ad.softmax(ad.reshape(x, (3, 5))),
                                             [4, 2, 3], np.array([1, 0, 1]))), point

    run("probe_comp", build_probe_comp)
    return results


# ---------------------------------------------------------------------------
# loss value oracles, channel statistics, digital chain
# ---------------------------------------------------------------------------


def loss_value_oracles() -> list[CheckResult]:
    results = []
    d_half = ls.disc_loss(Tensor(0.5), Tensor(0.5)).item()
    results.append(_result("oracle/disc_loss", d_half == 0.25, f"got {d_half!r}, want 0.25"))
    g = ls.gen_loss(Tensor(np.zeros((1, 10))), Tensor(np.full((1, 10), math.sqrt(0.1))),
                    Tensor(0.5), ls.LossConfig(xi=10.0)).item()
    results.append(_result("oracle/gen_loss", abs(g - 0.625) <= 1e-12, f"got {g!r}, want 0.625"))
    pn = ls.probe_net_loss(Tensor([1.0, 2.0]), Tensor([1.0, 1.0]), Tensor([1.0, 0.5])).item()
    results.append(_result("oracle/probe_net_loss", pn == 2.25, f"got {pn!r}, want 2.25"))

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        logits = rng.normal(size=(3, 4))
        pred = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        targets = [3, 3, 2]
        for rule in ("paper-literal", "standard"):
            got = ls.lsr_ce(Tensor(pred), targets,
                            ls.LossConfig(kappa=0.95, smoothing_mass_rule=rule)).item()
            mass = 0.95 if rule == "paper-literal" else 0.05
            expect = 0.0
            for l, t in enumerate(targets):
                expect += 0.95 * -math.log(pred[l, t])
                expect += sum((mass / 3) * -math.log(pred[l, e]) for e in range(4) if e != t)
            worst = max(worst, abs(got - expect / 3))
    results.append(_result("oracle/lsr_ce_exhaustive", worst <= 1e-12,
                           f"max |diff| {worst:.2e} over 50 cases, both rules"))
    ce_eq = abs(ls.lsr_ce(Tensor(pred), targets,
                          ls.LossConfig(kappa=1.0, smoothing_mass_rule="standard")).item()
                - ls.plain_ce(Tensor(pred), targets).item())
    results.append(_result("oracle/lsr_ce_kappa1", ce_eq <= 1e-12, f"|diff| {ce_eq:.2e}"))
    return results


def channel_statistics(n_symbols: int = 1_000_000, n_blocks: int = 100_000,
                       ) -> list[CheckResult]:
    results = []
    x = np.ones(n_symbols, dtype=np.complex128)
    cfg = ch.ChannelConfig(kind="awgn", snr_db=7.0, seed=1234)
    y, _ = ch.apply_channel(x, cfg)
    snr_meas = 10 * np.log10(1.0 / np.mean(np.abs(y - x) ** 2))
    results.append(_result("channel/awgn_snr", abs(snr_meas - 7.0) <= 0.1,
                           f"measured {snr_meas:.3f} dB at target 7.0 over {n_symbols} symbols"))

    cfgr = ch.ChannelConfig(kind="rayleigh", snr_db=9.0, seed=99)
    block = np.ones(10, dtype=np.complex128)
    h2 = sig = noi = 0.0
    for b in range(n_blocks):
        _, real = ch.apply_channel(block, cfgr, block_index=b)
        h2 += abs(real.h) ** 2
        sig += abs(real.h) ** 2 * 10
        noi += np.sum(np.abs(real.noise) ** 2)
    h2 /= n_blocks
    results.append(_result("channel/rayleigh_h2", abs(h2 - 1.0) < 0.02,
                           f"mean |h|^2 = {h2:.4f} over {n_blocks} blocks"))
    snr_ray = 10 * np.log10(sig / noi)
    results.append(_result("channel/rayleigh_snr", abs(snr_ray - 9.0) <= 0.1,
                           f"measured {snr_ray:.3f} dB at target 9.0"))

    f = np.random.default_rng(5).normal(size=(8, 8))
    sym, scale = ch.to_symbols(f)
    back = ch.from_symbols(sym, scale, f.shape)
    results.append(_result("channel/round_trip", np.max(np.abs(back - f)) <= 1e-12,
                           "to_symbols/from_symbols inverse"))

    cfg_nl = ch.ChannelConfig(kind="rayleigh", snr_db=math.inf, seed=7)
    xs = np.random.default_rng(6).normal(size=64).view(np.complex128)
    y, real = ch.apply_channel(xs, cfg_nl, block_index=3)
    err = np.max(np.abs(ch.equalize(y, real) - xs))
    results.append(_result("channel/noiseless_equalize", err <= 1e-12, f"max err {err:.2e}"))
    return results


def digital_chain_oracles() -> list[CheckResult]:
    results = []
    ok = True
    for word in range(16):
        data = np.array([(word >> i) & 1 for i in range(4)], dtype=np.uint8)
        code = ev.hamming_encode(data)
        for pos in range(7):
            bad = code.copy()
            bad[pos] ^= 1
            ok = ok and np.array_equal(ev.hamming_decode(bad), data)
    results.append(_result("digital/hamming74", ok, "all 16 codewords x 7 single flips"))

    bits = np.random.default_rng(3).integers(0, 2, size=4096).astype(np.uint8)
    rt = np.array_equal(ev.qam16_demodulate(ev.qam16_modulate(bits)), bits)
    pwr = abs(np.mean(np.abs(ev._QAM_POINTS) ** 2) - 1.0) <= 1e-12
    results.append(_result("digital/qam16", rt and pwr, "round trip and unit power"))

    f = np.random.default_rng(4).normal(size=(20, 8))
    q, lo, hi = ev.quantize_frames(f)
    bound = np.max(np.abs(ev.dequantize_frames(q, lo, hi) - f)) <= (hi - lo) / 255
    results.append(_result("digital/quantizer", bound, "reconstruction within one step"))
    return results


# ---------------------------------------------------------------------------
# fault injection and the full battery
# ---------------------------------------------------------------------------


@contextmanager
def broken_sigmoid_backward():
    """Deliberately corrupt one backward rule (test fixture for the battery)."""
    original = ad.sigmoid

    def bad_sigmoid(x):
        out = expit(x.data)
        return ad._finish("sigmoid", (x,), out, lambda g: (1.01 * g * out * (1.0 - out),))

    ad.sigmoid = bad_sigmoid
    try:
        yield
    finally:
        ad.sigmoid = original


def run_self_test(quick: bool = False, inject_grad_fault: bool = False,
                  ) -> tuple[list[CheckResult], float]:
    t0 = time.time()
    op_points = 10 if quick else 100
    loss_points = 10 if quick else 100
    n_symbols = 100_000 if quick else 1_000_000
    n_blocks = 10_000 if quick else 100_000

    results: list[CheckResult] = []

    def battery():
        results.extend(op_gradient_battery(points_per_op=op_points))
        results.extend(block_gradient_battery(points=1 if quick else 2))
        results.extend(network_gradient_battery(points=1 if quick else 2))
        results.extend(loss_gradient_battery(points=loss_points))
        results.extend(loss_value_oracles())
        results.extend(channel_statistics(n_symbols=n_symbols, n_blocks=n_blocks))
        results.extend(digital_chain_oracles())

    if inject_grad_fault:
        with broken_sigmoid_backward():
            battery()
    else:
        battery()
    return results, time.time() - t0


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  result  detail", "-" * (width + 30)]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}    {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results)} checks, {n_fail} failures")
    return "\n".join(lines)
