"""Command-line interface: ``attack``, ``verify`` and ``bench``.

Config files are flat ``key = value`` text with ``#`` comments::

    arch = mlp:h=64
    batch_size = 4
    iterations = 300
    alpha = 0.999
    tv_weight = 0.005
    strategy = constant
    constant_S = 2
    methods = magia,dlg
    seeds = 1-5

Exit codes: 0 success, 2 config error, 3 runtime failure, 4 verification
failure. ``GRADSENSE_THREADS`` caps the number of parallel runs.
"""
import argparse
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from gradsense import dataio, kernels
from gradsense.attack import AttackConfig, AttackError, run_dlg, run_magia
from gradsense.metrics import batch_report
from gradsense.objective import STRATEGIES, ScheduleSpec, adaptive_coefficient
from gradsense.optim import parse_optimizer
from gradsense.victim import init_model, parse_arch, sag_capture

log = logging.getLogger("gradsense")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 2, 3, 4
METHODS = ("magia", "dlg")


class ConfigError(ValueError):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _shape(text):
    parts = str(text).lower().replace(",", "x").split("x")
    shape = tuple(int(p) for p in parts if p.strip())
    if len(shape) != 3:
        raise ValueError(f"shape must be CxHxW, got {text!r}")
    return shape


def _int_list(text):
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        lo, dash, hi = part.partition("-")
        if dash and lo:
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("empty list")
    return tuple(out)


def _methods(text):
    out = tuple(m.strip() for m in str(text).split(",") if m.strip())
    bad = [m for m in out if m not in METHODS]
    if bad or not out:
        raise ValueError(f"methods must be a non-empty subset of {METHODS}, got {text!r}")
    return out


def _choice(*allowed):
    def conv(text):
        t = str(text).strip()
        if t not in allowed:
            raise ValueError(f"{t!r} is not one of: {', '.join(allowed)}")
        return t
    return conv


def _optimizer(text):
    return str(parse_optimizer(text))


@dataclass
class ExperimentConfig:
    dataset: str = "synth"
    synth_pattern: str = "blocks"
    image_shape: tuple = (1, 16, 16)
    num_classes: int = 10
    idx_images: str = None
    idx_labels: str = None
    cifar_path: str = None
    cifar_variant: str = "cifar10"
    arch: str = "mlp:h=64"
    batch_size: int = 4
    iterations: int = 300
    alpha: float = 0.999
    tv_weight: float = 0.005
    strategy: str = "constant"
    constant_S: int = 2
    E_script: int = 300
    optimizer: str = "lbfgs"
    methods: tuple = ("magia", "dlg")
    seeds: tuple = (1,)
    out: str = "runs"
    psnr_threshold: float = 19.0
    clamp_images: bool = False
    record_every: int = 50
    record_wall_time: bool = False

    def schedule(self):
        return ScheduleSpec(self.strategy, self.constant_S, self.E_script, max(self.iterations, 1))

    def attack_config(self, seed):
        return AttackConfig(
            batch_size=self.batch_size,
            iterations=self.iterations,
            alpha=self.alpha,
            tv_weight=self.tv_weight,
            schedule=self.schedule(),
            optimizer=self.optimizer,
            seed=seed,
            clamp_images=self.clamp_images,
            record_every=self.record_every,
        )


CONVERTERS = {
    "dataset": _choice("synth", "idx", "cifar"),
    "synth_pattern": _choice("blocks", "gradients-and-shapes"),
    "image_shape": _shape,
    "num_classes": int,
    "idx_images": str,
    "idx_labels": str,
    "cifar_path": str,
    "cifar_variant": _choice("cifar10", "cifar100"),
    "arch": str,
    "batch_size": int,
    "iterations": int,
    "alpha": float,
    "tv_weight": float,
    "strategy": _choice(*STRATEGIES),
    "constant_S": int,
    "E_script": int,
    "optimizer": _optimizer,
    "methods": _methods,
    "seeds": _int_list,
    "out": str,
    "psnr_threshold": float,
    "clamp_images": _bool,
    "record_every": int,
    "record_wall_time": _bool,
}

REQUIRED = {
    "idx": ("idx_images", "idx_labels"),
    "cifar": ("cifar_path",),
}


def _parse_lines(text, source):
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        pairs.append((key.strip(), value.strip(), f"{source}:{lineno}"))
    return pairs


def parse_config(path=None, flag_overrides=()):
    """Typed config from a flat key-value file plus ``key=value`` overrides.

    Overrides win over file values. Unknown keys, bad values and missing
    dataset paths raise ConfigError.
    """
    pairs = []
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                pairs += _parse_lines(f.read(), path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for i, item in enumerate(flag_overrides):
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"override {item!r} must be key=value")
        pairs.append((key.strip(), value.strip(), f"override {i + 1}"))

    values = {}
    for key, value, where in pairs:
        if key not in CONVERTERS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            values[key] = CONVERTERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None

    cfg = ExperimentConfig(**values)
    for key in REQUIRED.get(cfg.dataset, ()):
        if getattr(cfg, key) is None:
            raise ConfigError(f"missing required key {key!r} for dataset {cfg.dataset!r}")
    try:
        if cfg.dataset == "synth":
            dataio.SynthSpec(cfg.image_shape, cfg.num_classes, cfg.synth_pattern)
            parse_arch(cfg.arch, cfg.image_shape, cfg.num_classes)
        cfg.attack_config(cfg.seeds[0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


# ---------------------------------------------------------------------------
# experiment


def _load_dataset(cfg):
    if cfg.dataset == "idx":
        return dataio.read_idx(cfg.idx_images, cfg.idx_labels)
    if cfg.dataset == "cifar":
        return dataio.read_cifar_bin(cfg.cifar_path, cfg.cifar_variant)
    return None


def _hidden_batch(cfg, image_set, seed):
    if image_set is None:
        spec = dataio.SynthSpec(cfg.image_shape, cfg.num_classes, cfg.synth_pattern, seed)
        return dataio.synth_batch(spec, cfg.batch_size), cfg.image_shape, cfg.num_classes
    batch = dataio.sample_batch(image_set, cfg.batch_size, seed)
    return batch, image_set.images.shape[1:], image_set.num_classes


def run_one(cfg, method, seed, image_set=None):
    """Victim -> hidden batch -> averaged gradient -> attack -> metrics."""
    hidden, shape, num_classes = _hidden_batch(cfg, image_set, seed)
    model = init_model(parse_arch(cfg.arch, shape, num_classes), seed)
    target = sag_capture(model, hidden)
    attack = run_magia if method == "magia" else run_dlg
    result = attack(cfg.attack_config(seed), target, model)
    report = batch_report(result.final_images, hidden.images, cfg.psnr_threshold)
    return hidden.images, result, report


def _row(cfg, method, seed, result, report):
    magia = method == "magia"
    row = {
        "run_id": f"{method}-seed{seed}",
        "method": method,
        "dataset": cfg.dataset if cfg.dataset != "synth" else f"synth-{cfg.synth_pattern}",
        "batch_size": cfg.batch_size,
        "arch": cfg.arch,
        "strategy": cfg.strategy if magia else None,
        "schedule_param": cfg.schedule().param if magia else None,
        "alpha": float(cfg.alpha) if magia else None,
        "tv_weight": float(cfg.tv_weight),
        "iterations": cfg.iterations,
        "optimizer": cfg.optimizer,
        "seed": seed,
        "final_loss": result.final_loss,
        "wall_time_s": float(result.wall_time.sum()) if cfg.record_wall_time else None,
    }
    row.update(report.as_row())
    return row


def _job(args):
    cfg, method, seed = args
    image_set = _load_dataset(cfg)
    try:
        return method, seed, run_one(cfg, method, seed, image_set), None
    except (AttackError, ValueError, ArithmeticError) as exc:
        return method, seed, None, f"{method} seed {seed}: {exc}"


def _write_run_outputs(out, run_id, truth, result, report):
    trace = ["iteration,S,loss"]
    trace += [f"{i},{s},{v:.17g}" for i, (s, v) in enumerate(zip(result.per_iteration_S, result.loss_trace))]
    os.makedirs(os.path.join(out, "traces"), exist_ok=True)
    dataio.atomic_write_bytes(os.path.join(out, "traces", f"{run_id}.csv"), ("\n".join(trace) + "\n").encode())
    img_dir = os.path.join(out, "images", run_id)
    os.makedirs(img_dir, exist_ok=True)
    ext = "pgm" if truth.shape[1] == 1 else "ppm"
    for i, j in enumerate(report.matching):
        dataio.write_image(truth[i], os.path.join(img_dir, f"truth_{i:02d}.{ext}"))
        dataio.write_image(np.clip(result.final_images[j], 0, 1), os.path.join(img_dir, f"recon_{i:02d}.{ext}"))
    for it, snap in sorted(result.snapshots.items()):
        for i, j in enumerate(report.matching):
            dataio.write_image(np.clip(snap[j], 0, 1), os.path.join(img_dir, f"iter{it:04d}_{i:02d}.{ext}"))


def _check_writable(out):
    os.makedirs(out, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=out, prefix=".probe-"):
        pass


def run_experiment(cfg, stream=None):
    """Run every (method, seed) pair and write report.csv, traces and images."""
    stream = stream or sys.stdout
    try:
        _check_writable(cfg.out)
    except OSError as exc:
        print(f"error: output directory {cfg.out!r} is not writable: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    jobs = [(cfg, m, s) for m in sorted(cfg.methods) for s in cfg.seeds]
    workers = max(1, int(os.environ.get("GRADSENSE_THREADS", "1") or 1))
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
                results = list(pool.map(_job, jobs))
        else:
            results = [_job(j) for j in jobs]
    except (OSError, dataio.DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    failures = [err for *_, err in results if err]
    if failures:
        for err in failures:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME

    rows = []
    per_method = {}
    for method, seed, (truth, result, report), _ in results:
        row = _row(cfg, method, seed, result, report)
        rows.append(row)
        per_method.setdefault(method, []).append(report.psnr_mean)
        _write_run_outputs(cfg.out, row["run_id"], truth, result, report)
        print(
            f"{row['run_id']:>16}  psnr {report.psnr_mean:6.2f} ± {report.psnr_std:5.2f} (over images)"
            f"  ssim {report.ssim_mean:.3f}  recr {report.recr:.2f}  loss {result.final_loss:.3e}",
            file=stream,
        )
    dataio.write_csv_report(rows, os.path.join(cfg.out, "report.csv"))
    for method, vals in sorted(per_method.items()):
        v = np.array(vals)
        print(f"{method:>16}  psnr {v.mean():6.2f} ± {v.std():5.2f} (over {len(v)} seeds)", file=stream)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def run_verify(B_max=6, trials=200, seed=0, identity_max=64, report_path=None, stream=None):
    """Exhaustive checks of the bound chain; exit 0 iff every asserted check passes."""
    stream = stream or sys.stdout
    from gradsense import verify as V

    if not 2 <= B_max <= V.ENUMERATION_LIMIT:
        print(f"error: B_max must lie in [2, {V.ENUMERATION_LIMIT}]", file=sys.stderr)
        return EXIT_CONFIG
    rng = np.random.default_rng(seed)
    checks = []

    def record(name, passed, detail, asserted=True):
        checks.append({"check": name, "passed": bool(passed), "asserted": asserted, "detail": detail})

    record("coefficient identity", V.coefficient_identity_check(identity_max), f"1 <= S <= B <= {identity_max}")
    coef_ok = all(adaptive_coefficient(B, S) <= 1.0 for B in range(1, identity_max + 1)
                  for S in range(1, B + 1) if B * S >= 2)

    tri_total = tri_ok = tail_ok = head_ok = probes = 0
    for _ in range(trials):
        B = int(rng.integers(2, B_max + 1))
        P = int(rng.integers(1, 6))
        inputs = V.OracleInputs(rng.normal(size=(B, P)), rng.normal(size=(B, P)))
        for S in range(1, B + 1):
            flags = V.triangle_step_check(inputs, S)
            tri_total += len(flags)
            tri_ok += sum(flags)
            rep = V.oracle_chain_probe(inputs, S)
            probes += 1
            tail_ok += rep.holds_o_le_hat
            head_ok += rep.holds_tilde_le_o
    record("tightness (coef <= 1, rescaled <= DLG)", coef_ok and tail_ok == probes, f"{tail_ok}/{probes} probes")
    record("triangle step", tri_ok == tri_total, f"{tri_ok}/{tri_total} subsets")
    record("chain head (reported only)", True, f"holds in {head_ok}/{probes} random probes", asserted=False)

    cancel = V.oracle_chain_probe(V.OracleInputs([[1.0, 0.0], [-1.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]), 1)
    record(
        "cancellation fixture (head fails as documented)",
        (not cancel.holds_tilde_le_o) and abs(cancel.x_tilde - 0.25) < 1e-12 and cancel.x_tilde_o == 0.0,
        f"x_tilde={cancel.x_tilde:g} x_tilde_o={cancel.x_tilde_o:g}",
    )
    same = rng.normal(size=(3, 4))
    ident = V.oracle_chain_probe(V.OracleInputs(same, same), 2)
    record(
        "identical per-sample fixture (all zeros)",
        (ident.x_tilde, ident.x_tilde_o, ident.x_hat) == (0.0, 0.0, 0.0) and ident.holds_tilde_le_o,
        "x_tilde = x_tilde_o = x_hat = 0",
    )
    d = rng.normal(size=3)
    equal = V.oracle_chain_probe(V.OracleInputs(np.tile(d, (4, 1)), np.zeros((4, 3))), 2)
    record("equal-difference fixture (head holds)", equal.holds_tilde_le_o, f"x_tilde={equal.x_tilde:.6g} x_tilde_o={equal.x_tilde_o:.6g}")

    inputs = V.OracleInputs(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)))
    exact = float(np.mean(V.enumerate_subset_losses(inputs, 2)))
    sampled = V.sampled_subset_mean(inputs, 2, 10_000, rng)
    record("exhaustive vs sampled mean (2%)", abs(sampled - exact) <= 0.02 * exact, f"exact={exact:.6g} sampled={sampled:.6g}")

    width = max(len(c["check"]) for c in checks)
    for c in checks:
        status = "PASS" if c["passed"] else "FAIL"
        if not c["asserted"]:
            status = "INFO"
        print(f"{status}  {c['check']:<{width}}  {c['detail']}", file=stream)
    ok = all(c["passed"] for c in checks if c["asserted"])
    if report_path:
        payload = {"B_max": B_max, "trials": trials, "seed": seed, "passed": ok, "checks": checks}
        os.makedirs(os.path.dirname(os.path.abspath(report_path)), exist_ok=True)
        dataio.atomic_write_bytes(report_path, (json.dumps(payload, indent=2) + "\n").encode())
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# bench


def bench_methods(cfg, iterations=100, seed=None):
    """Mean per-iteration wall time of MAGIA and DLG on the same victim and target."""
    seed = cfg.seeds[0] if seed is None else seed
    hidden, shape, num_classes = _hidden_batch(cfg, _load_dataset(cfg), seed)
    model = init_model(parse_arch(cfg.arch, shape, num_classes), seed)
    target = sag_capture(model, hidden)
    bench_cfg = ExperimentConfig(**{f.name: getattr(cfg, f.name) for f in fields(cfg)})
    bench_cfg.iterations = iterations
    attack_cfg = bench_cfg.attack_config(seed)
    attack_cfg.record_every = 0
    out = {}
    for name, fn in (("dlg", run_dlg), ("magia", run_magia)):
        out[name] = float(np.mean(fn(attack_cfg, target, model).wall_time))
    return out


def bench_kernels(repeats=200, shape=(8, 12, 16, 16), k=5, stride=2):
    """Seconds per call of im2col + col2im for the compiled and numpy backends."""
    x = np.random.default_rng(0).random(shape)
    backends = {"numpy": (kernels.im2col_numpy, kernels.col2im_numpy)}
    if kernels.BACKEND == "cython":
        backends["cython"] = (kernels.im2col, kernels.col2im)
    out = {}
    for name, (fwd, adj) in backends.items():
        cols = fwd(x, k, stride)
        t0 = time.perf_counter()
        for _ in range(repeats):
            adj(fwd(x, k, stride), shape[1], shape[2], shape[3], k, stride)
        out[name] = (time.perf_counter() - t0) / repeats
        assert cols.shape[1] == shape[1] * k * k
    return out


# ---------------------------------------------------------------------------
# entry point


def _build_parser():
    p = argparse.ArgumentParser(prog="gradsense", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--method", choices=METHODS, help="run a single method")
        sp.add_argument("--seed", type=int, help="run a single seed")
        sp.add_argument("--out", help="output directory")

    common(sub.add_parser("attack", help="capture an averaged gradient and invert it"))

    v = sub.add_parser("verify", help="brute-force checks of the combinatorial bound chain")
    v.add_argument("--b-max", type=int, default=6, help="largest batch size for exhaustive probes (<= 12)")
    v.add_argument("--identity-max", type=int, default=64)
    v.add_argument("--trials", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="directory for verify_report.json")

    b = sub.add_parser("bench", help="per-iteration timing of MAGIA vs DLG, and kernel backends")
    common(b)
    b.add_argument("--iterations", type=int, default=100)
    b.add_argument("--max-ratio", type=float, default=2.5)
    b.add_argument("--kernels", action="store_true", help="also time compiled vs numpy conv kernels")
    return p


def _config_from_args(args):
    overrides = list(args.set)
    if args.method:
        overrides.append(f"methods={args.method}")
    if args.seed is not None:
        overrides.append(f"seeds={args.seed}")
    if args.out:
        overrides.append(f"out={args.out}")
    return parse_config(args.config, overrides)


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "verify":
        report = os.path.join(args.out, "verify_report.json") if args.out else None
        return run_verify(args.b_max, args.trials, args.seed, args.identity_max, report)

    try:
        cfg = _config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "attack":
        return run_experiment(cfg)

    try:
        times = bench_methods(cfg, args.iterations)
    except (AttackError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    ratio = times["magia"] / times["dlg"]
    print(f"dlg    {times['dlg'] * 1e3:8.2f} ms/iter")
    print(f"magia  {times['magia'] * 1e3:8.2f} ms/iter")
    print(f"ratio  {ratio:8.2f}  (limit {args.max_ratio:g})  {'PASS' if ratio <= args.max_ratio else 'FAIL'}")
    if args.kernels:
        for name, sec in bench_kernels().items():
            print(f"kernels[{name}]  {sec * 1e6:8.1f} us/call (im2col + col2im)")
    return EXIT_OK if ratio <= args.max_ratio else EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
