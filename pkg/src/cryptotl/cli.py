"""Command line interface: ``cryptotl <command> [flags]``.

Results go to stdout as JSON (one object per line); logs go to stderr.
Exit codes: 0 success, 2 usage, 3 data, 4 protocol, 5 crypto/depth.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import signal
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import ckks, nn
from .data import EMBEDDING_WIDTH, fixture_path, make_domain_pair, read_csv, subsample
from .errors import CryptoTLError, DataError, UsageError
from .experiment import parse_fractions, summarize, tl_curve
from .he_layers import (EvalKeys, FrozenWeights, frozen_forward, pack_batch, plaintext_frozen_forward,
                        plan_packing, plan_rotations, prepare_layers, unpack_batch)
from .nn.privacy import DpConfig
from .protocol import (Client, OfflineListener, Server, TcpListener, connect_tcp,
                       open_offline_session)
from .protocol.frames import default_port, max_frame_size
from .storage import (eval_key_bytes, generate_keys, load_frozen, load_keys, load_model,
                      save_frozen, save_keys, save_model)

log = logging.getLogger("cryptotl.cli")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROTOCOL, EXIT_CRYPTO = 0, 2, 3, 4, 5
CACHE_EVERY = 16  # queries between feature-cache checkpoints


def emit(obj: dict):
    print(json.dumps(obj, sort_keys=True), flush=True)


def _round(t: float) -> float:
    return round(t, 6)


def resolve_data(spec: str) -> str:
    """A CSV path, or ``fixture:<name>`` for a bundled fixture."""
    if spec.startswith("fixture:"):
        return str(fixture_path(spec.split(":", 1)[1] + ".csv.gz"))
    return spec


def load_dataset(spec: str, width: int) -> tuple:
    x, y = read_csv(resolve_data(spec), width)
    if len(y) == 0:
        raise DataError(f"{spec}: no samples")
    return x, y


def _data_digest(x, y) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<i8").tobytes())
    return h.hexdigest()


def _connector(args):
    if args.offline_dir:
        return lambda: open_offline_session(args.offline_dir, timeout=args.timeout)
    return lambda: connect_tcp(args.server, timeout=args.timeout, max_frame=max_frame_size())


# --------------------------------------------------------------------------- commands

def cmd_keygen(args) -> int:
    params = ckks.get_preset(args.preset)
    bundle = generate_keys(params, args.width, args.seed)
    files = save_keys(bundle, args.out_dir, force=args.force)
    emit({"command": "keygen", "preset": params.name, "label": params.label,
          "insecure": params.insecure, "fingerprint": params.fingerprint.hex(),
          "width": args.width, "galois_steps": len(bundle.galois.keys),
          "p_impl": bundle.plan.p_impl, "files": files})
    return EXIT_OK


def _dp_from_args(args) -> DpConfig | None:
    if args.dp_noise is None or args.dp_noise == 0:
        return None
    return DpConfig(clip=args.dp_clip, noise=args.dp_noise, delta=args.dp_delta)


def _train_config(args) -> nn.TrainConfig:
    return nn.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)


def cmd_train_source(args) -> int:
    config = _train_config(args)
    dp = _dp_from_args(args)
    x, y = load_dataset(args.data, args.width)
    spec = nn.server_spec(args.width)
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        result = nn.train_source(x, y, spec, config, dp)
    for w in caught:
        log.warning(str(w.message))
    save_model(args.out, result.state, "server")
    out = {"command": "train-source", "n": int(len(y)), "epochs_run": len(result.history),
           "steps": result.steps, "val_accuracy": result.val_accuracy, "out": args.out,
           "t_train": _round(time.perf_counter() - start)}
    if result.privacy is not None:
        out.update(epsilon=result.privacy.epsilon, delta=result.privacy.delta,
                   dp_noise=dp.noise, dp_clip=dp.clip)
    emit(out)
    return EXIT_OK


def cmd_export_frozen(args) -> int:
    kind, spec, state = load_model(args.weights)
    if kind != "server":
        raise DataError(f"{args.weights} holds a client model; export needs the server model")
    frozen = nn.frozen_weights(state, spec)
    save_frozen(args.out, frozen)
    emit({"command": "export-frozen", "width": frozen.width, "out_width": frozen.out_width,
          "out": args.out})
    return EXIT_OK


def cmd_serve(args) -> int:
    params = ckks.get_preset(args.preset)
    if params.insecure and not args.allow_insecure:
        raise UsageError(f"preset {params.name} is insecure; pass --allow-insecure to serve it")
    weights = load_frozen(args.weights)
    plan = plan_packing(params, weights.width)
    start = time.perf_counter()
    layers = prepare_layers(weights, plan, params, params.max_level, params.log_scale)
    t_prepare = time.perf_counter() - start
    if args.offline_dir:
        listener = OfflineListener(args.offline_dir)
        where = str(Path(args.offline_dir).resolve())
    else:
        listener = TcpListener(args.host, default_port() if args.port is None else args.port,
                               max_frame=max_frame_size())
        where = listener.address
    server = Server(listener, params, layers, plan, max_sessions=args.max_sessions)

    def _stop(signum, frame):
        log.info(json.dumps({"event": "signal", "signal": signum}))
        server.shutdown()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    emit({"event": "listening", "address": where, "preset": params.name, "label": params.label,
          "fingerprint": params.fingerprint.hex(), "width": weights.width, "p_impl": plan.p_impl,
          "t_prepare": _round(t_prepare)})
    server.serve_forever()
    emit({"event": "stopped", "metrics": server.metrics.snapshot()})
    return EXIT_OK


def _load_cache(path: Path, digest: str, fingerprint: str, n: int, out_width: int):
    if not path.exists():
        return np.zeros((0, out_width))
    with np.load(path, allow_pickle=False) as z:
        if str(z["digest"]) != digest or str(z["fingerprint"]) != fingerprint:
            log.warning(json.dumps({"event": "cache-stale", "path": str(path)}))
            return np.zeros((0, out_width))
        feats = np.array(z["features"])
    if feats.ndim != 2 or feats.shape[1] != out_width or feats.shape[0] > n:
        return np.zeros((0, out_width))
    return feats


def _save_cache(path: Path, digest: str, fingerprint: str, feats: np.ndarray):
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, digest=np.array(digest), fingerprint=np.array(fingerprint), features=feats)
    tmp.replace(path)


def cmd_finetune(args) -> int:
    config = _train_config(args)
    if not 0 < args.fraction <= 100:
        raise UsageError("--fraction must be in (0, 100]")
    bundle = load_keys(args.keys)
    params, plan = bundle.params, bundle.plan
    x, y = load_dataset(args.data, plan.t)
    if args.fraction < 100:
        x, y = subsample(x, y, args.fraction / 100.0, args.seed)
    digest, fp = _data_digest(x, y), params.fingerprint.hex()
    cache = Path(args.cache or args.out + ".features.npz")
    feats = _load_cache(cache, digest, fp, len(y), plan.out_width)
    cached = len(feats)
    p = plan.p_impl
    client = Client(_connector(args), params, bundle.secret, eval_key_bytes(args.keys), plan,
                    seed=args.seed)
    # every batch is encrypted with its own generator so a resumed run matches a fresh one
    parts = [feats]
    try:
        for k, lo in enumerate(range(cached, len(y), p)):
            client.rng = np.random.default_rng([args.seed, lo])
            parts.append(client.query(x[lo: lo + p]))
            if (k + 1) % CACHE_EVERY == 0:
                _save_cache(cache, digest, fp, np.concatenate(parts))
    finally:
        done = np.concatenate(parts)
        if len(done) > cached:
            _save_cache(cache, digest, fp, done)
        client.close()
    start = time.perf_counter()
    spec = nn.client_spec(plan.out_width)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        result = nn.finetune_client(done, y, spec, config)
    t_finetune = time.perf_counter() - start
    save_model(args.out, result.state, "client")
    emit({"command": "finetune", "n": int(len(y)), "p_impl": p, "queries": client.queries_sent,
          "cached_rows": cached, "val_accuracy": result.val_accuracy, "out": args.out,
          "t_S": _round(client.t_server), "t_finetune": _round(t_finetune)})
    return EXIT_OK


def cmd_predict(args) -> int:
    bundle = load_keys(args.keys)
    params, plan = bundle.params, bundle.plan
    kind, spec, state = load_model(args.client_weights)
    if kind != "client":
        raise DataError(f"{args.client_weights} does not hold a client model")
    if spec.input_width != plan.out_width:
        raise DataError(f"client model expects width {spec.input_width}, keys produce {plan.out_width}")
    x, y = load_dataset(args.input, plan.t)
    client = Client(_connector(args), params, bundle.secret, eval_key_bytes(args.keys), plan,
                    seed=args.seed)
    p = plan.p_impl
    correct, t_s_all, t_c_all = 0, [], []
    try:
        for lo in range(0, len(y), p):
            client.rng = np.random.default_rng([args.seed, lo])
            before = client.t_server
            feats = client.query(x[lo: lo + p])
            t_s = client.t_server - before
            for j, f in enumerate(feats):
                start = time.perf_counter()
                cls, score = nn.predict(state, spec, f[None, :])
                t_c = time.perf_counter() - start
                i = lo + j
                correct += int(cls[0] == y[i])
                t_s_all.append(t_s)
                t_c_all.append(t_c)
                emit({"index": i, "class": int(cls[0]), "score": float(score[0]),
                      "t_S": _round(t_s), "t_C": _round(t_c)})
    finally:
        client.close()
    emit({"command": "predict", "n": int(len(y)), "queries": client.queries_sent,
          "accuracy": correct / len(y), "t_S_mean": _round(float(np.mean(t_s_all))),
          "t_C_mean": _round(float(np.mean(t_c_all)))})
    return EXIT_OK


def cmd_bench(args) -> int:
    params = ckks.get_preset(args.preset)
    if args.repeat < 1:
        raise UsageError("--repeat must be at least 1")
    plan = plan_packing(params, args.width)
    rng = np.random.default_rng(args.seed)
    start = time.perf_counter()
    sk, _, rk = ckks.keygen(params, rng)
    gks = ckks.gen_galois_keys(sk, plan_rotations(plan), rng)
    t_keygen = time.perf_counter() - start
    weights = FrozenWeights.random(args.width, seed=args.seed)
    start = time.perf_counter()
    layers = prepare_layers(weights, plan, params, params.max_level, params.log_scale)
    t_prepare = time.perf_counter() - start
    items = rng.uniform(-1, 1, size=(plan.p_impl, args.width))
    ct = ckks.encrypt(ckks.encode(pack_batch(items, plan), params), sk, rng)
    keys = EvalKeys(rk, gks)
    times, ops = [], {}
    for _ in range(args.repeat):
        ops = {}
        start = time.perf_counter()
        out = frozen_forward(ct, layers, plan, keys, ops)
        times.append(time.perf_counter() - start)
    got = unpack_batch(ckks.decrypt_decode(out, sk), plan, len(items), plan.out_width)
    err = float(np.max(np.abs(got - plaintext_frozen_forward(items, weights))))
    report = {"command": "bench", "preset": params.name, "label": params.label,
              "degree": params.degree, "slots": params.slots, "width": args.width,
              "p_impl": plan.p_impl, "p_paper": plan.p_paper, "t1": plan.t1, "t2": plan.t2,
              "levels_consumed": ct.level - out.level, "repeat": args.repeat, "threads": 1,
              "times_s": [_round(t) for t in times], "mean_s": _round(float(np.mean(times))),
              "min_s": _round(float(np.min(times))), "t_keygen": _round(t_keygen),
              "t_prepare": _round(t_prepare), "max_abs_error": err,
              "ops": {stage: dict(sorted(c.items())) for stage, c in ops.items()}}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    emit(report)
    return EXIT_OK


def cmd_experiment(args) -> int:
    if args.scenario != "tl-curve":
        raise UsageError(f"unknown scenario {args.scenario!r}")
    fractions = parse_fractions(args.fractions)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    pair = make_domain_pair(args.seed, args.n_source, args.n_target, args.n_test)
    start = time.perf_counter()
    rows = tl_curve(fractions, args.seeds, args.seed, pair,
                    nn.TrainConfig(epochs=args.epochs, seed=args.seed))
    summary = summarize(rows)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "method", "seed", "accuracy", "std", "n_seeds"])
        for f, m, mean, std, n in summary:
            w.writerow([f"{f:g}", m, args.seed, f"{mean:.6f}", f"{std:.6f}", n])
    if args.per_seed_out:
        with open(args.per_seed_out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction", "method", "seed", "accuracy"])
            for r in rows:
                w.writerow([f"{r.fraction:g}", r.method, r.seed, f"{r.accuracy:.6f}"])
    emit({"command": "experiment", "scenario": args.scenario, "rows": len(summary),
          "summary": [{"fraction": f, "method": m, "mean": mean, "std": std}
                      for f, m, mean, std, _ in summary],
          "out": args.out, "t_total": _round(time.perf_counter() - start)})
    return EXIT_OK


# --------------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _common(p, width_default=EMBEDDING_WIDTH):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    if width_default is not None:
        p.add_argument("--width", type=_positive_int, default=width_default,
                       help=f"embedding width (default {width_default})")


def _training(p):
    p.add_argument("--epochs", type=_positive_int, default=3)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=float, default=0.01)


def _remote(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--server", metavar="HOST:PORT")
    g.add_argument("--offline-dir", metavar="DIR", help="exchange frames as files under DIR")
    p.add_argument("--timeout", type=float, default=600.0, help="seconds to wait for the server")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cryptotl", description="Privacy-preserving transfer learning over CKKS.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("keygen", help="generate client keys for a preset")
    p.add_argument("--preset", default="p1")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true", help="overwrite existing key files")
    _common(p)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("train-source", help="train the server model on source data")
    p.add_argument("--data", required=True, help="CSV path or fixture:source")
    p.add_argument("--out", required=True)
    p.add_argument("--dp-noise", type=float, default=None, help="noise multiplier; 0 disables DP")
    p.add_argument("--dp-clip", type=float, default=0.75)
    p.add_argument("--dp-delta", type=float, default=None)
    _training(p)
    _common(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("export-frozen", help="extract the frozen prefix of a server model")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    _common(p, None)
    p.set_defaults(func=cmd_export_frozen)

    p = sub.add_parser("serve", help="answer encrypted queries with the frozen layers")
    p.add_argument("--weights", required=True, help="frozen weights from export-frozen")
    p.add_argument("--preset", default="p1")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None, help="TCP port (default $CRYPTOTL_PORT or 7431)")
    p.add_argument("--offline-dir", metavar="DIR", help="serve sessions written as files under DIR")
    p.add_argument("--allow-insecure", action="store_true")
    p.add_argument("--max-sessions", type=_positive_int, default=None)
    _common(p, None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("finetune", help="query the server for features and train client layers")
    _remote(p)
    p.add_argument("--data", required=True)
    p.add_argument("--keys", required=True, help="key directory from keygen")
    p.add_argument("--out", required=True)
    p.add_argument("--cache", help="feature cache (default <out>.features.npz)")
    p.add_argument("--fraction", type=float, default=100.0, help="percent of the data to use")
    _training(p)
    _common(p, None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="classify inputs through the encrypted frozen layers")
    _remote(p)
    p.add_argument("--input", required=True)
    p.add_argument("--keys", required=True)
    p.add_argument("--client-weights", required=True)
    _common(p, None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="time the encrypted frozen layers")
    p.add_argument("--preset", default="p1")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", help="also write the JSON report here")
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("experiment", help="synthetic transfer-learning sweep")
    p.add_argument("--scenario", default="tl-curve")
    p.add_argument("--fractions", default="1,5,10,25,50,100")
    p.add_argument("--seeds", type=int, default=8)
    p.add_argument("--out", required=True, help="summary CSV")
    p.add_argument("--per-seed-out", help="optional CSV with one row per seed")
    p.add_argument("--n-source", type=_positive_int, default=2000)
    p.add_argument("--n-target", type=_positive_int, default=4000)
    p.add_argument("--n-test", type=_positive_int, default=1000)
    p.add_argument("--epochs", type=_positive_int, default=3)
    _common(p, None)
    p.set_defaults(func=cmd_experiment)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, CryptoTLError):
        return exc.exit_code
    if isinstance(exc, ConnectionError):
        return EXIT_PROTOCOL
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(message)s")
    try:
        return args.func(args)
    except (CryptoTLError, ConnectionError, OSError) as exc:
        code = exit_code(exc)
        print(f"cryptotl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
