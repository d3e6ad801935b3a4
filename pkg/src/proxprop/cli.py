"""Command-line harness.

    python -m proxprop train --dataset blobs --architecture 2-32-3 --oracle proxprop_cg --tau 0.5
    python -m proxprop sweep --taus 10,1,0.1 --oracles backprop,proxprop_cg3 --out table.csv
    python -m proxprop verify --seeds 50
    python -m proxprop probe-conditioning --dataset cifar10 --subset-size 5000

Every flag mirrors a :class:`~proxprop.optim.TrainConfig` field. A config file
(``--config``) holds ``key = value`` lines with the same names; flags given
on the command line win. The CIFAR-10 directory defaults to
``$PROXPROP_DATA_DIR``.
"""
import argparse
import csv
import dataclasses
import io
import json
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List

import numpy as np

from . import data
from .exceptions import ConfigError, FormatError
from .network import Conv2d, Dense, Flatten, MaxPool2d, Network, ReLU, Tanh
from .optim import TrainConfig, split_dataset, train

CSV_COLUMNS = ["epoch", "loss", "val_acc", "seconds", "diverged"]
EXIT_OK, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2


# ---------------------------------------------------------------------------
# architecture strings

_CONV = re.compile(r"conv(\d+)k(\d+)(?:p(\d+))?(?:s(\d+))?$")
_POOL = re.compile(r"pool(\d+)(?:s(\d+))?$")
_FC = re.compile(r"fc(\d+)$")


def build_network(architecture, input_shape, activation="relu", seed=0):
    """Build a network from an architecture string.

    ``"3072-500-120-500-10"`` is an MLP with ``activation`` between the
    layers. A bracketed spec lists layers explicitly, e.g.
    ``"[conv8k5p2-relu-pool2-fc10]"`` (conv: filters, kernel, padding,
    stride; pool: window, stride); a flatten is inserted before the first
    ``fc`` that follows spatial layers.
    """
    spec = architecture.strip()
    if not spec.startswith("["):
        try:
            widths = [int(w) for w in spec.split("-")]
        except ValueError:
            raise ConfigError(f"bad architecture {architecture!r}") from None
        if len(widths) < 2:
            raise ConfigError("an MLP needs at least an input and an output width")
        if widths[0] != int(np.prod(input_shape)):
            raise ConfigError(f"input width {widths[0]} does not match data of shape {input_shape}")
        return Network.mlp(widths, activation=activation, seed=seed)

    if not spec.endswith("]"):
        raise ConfigError(f"unterminated architecture {architecture!r}")
    shape = tuple(input_shape)
    layers = []
    for token in spec[1:-1].replace(",", "-").split("-"):
        token = token.strip().lower()
        if not token:
            continue
        if m := _CONV.match(token):
            if len(shape) != 3:
                raise ConfigError("conv layers need (channels, height, width) input")
            out, k, p, s = (int(g) if g else d for g, d in zip(m.groups(), (None, None, 0, 1)))
            layer = Conv2d(shape[0], out, k, stride=s, padding=p)
        elif m := _POOL.match(token):
            window = int(m.group(1))
            layer = MaxPool2d(window, int(m.group(2)) if m.group(2) else window)
        elif m := _FC.match(token):
            if len(shape) != 1:
                flat = Flatten()
                layers.append(flat)
                shape = flat.output_shape(shape)
            layer = Dense(shape[0], int(m.group(1)))
        elif token == "relu":
            layer = ReLU()
        elif token == "tanh":
            layer = Tanh()
        elif token == "flatten":
            layer = Flatten()
        else:
            raise ConfigError(f"unknown layer token {token!r}")
        layers.append(layer)
        shape = layer.output_shape(shape)
    return Network(layers, input_shape, seed=seed)


# ---------------------------------------------------------------------------
# datasets


def load_dataset(config):
    """``(Dataset, input_shape)`` for a config."""
    if config.dataset == "cifar10":
        val = 1000 if config.val_size is None else config.val_size
        X, y = data.load_cifar10(config.data_dir, config.subset_size + val)
        if X.shape[1] <= val:
            raise ConfigError("not enough CIFAR-10 records for the requested split")
        return split_dataset(X, y, val_size=val), data.CIFAR_SHAPE
    if config.dataset == "csv":
        if not config.csv_path:
            raise ConfigError("csv dataset needs csv_path")
        X, y = data.load_csv(config.csv_path)
    elif config.dataset == "blobs":
        X, y = data.synth_blobs(config.n_samples, config.n_classes, config.data_seed,
                                std=config.noise if config.noise > 0 else 0.3)
    else:
        X, y = data.synth_moons(config.n_samples, config.noise, config.data_seed)
    ds = split_dataset(X, y, config.val_fraction, config.val_size)
    return ds, (X.shape[0],)


def _input_shape_for(config, input_shape):
    # MLPs on image data take flat vectors
    if not config.architecture.strip().startswith("["):
        return (int(np.prod(input_shape)),)
    return input_shape


# ---------------------------------------------------------------------------
# runs and logs


def run_log_jsonl(log):
    lines = [json.dumps({"type": "header", **log.header}, sort_keys=True)]
    for r in log.records:
        lines.append(json.dumps({"type": "epoch", **dataclasses.asdict(r)}, sort_keys=True))
    return "\n".join(lines) + "\n"


def run_log_csv(log):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in log.records:
        writer.writerow([r.epoch, repr(r.full_batch_train_loss), repr(r.val_accuracy),
                         f"{r.elapsed_seconds:.3f}", int(r.diverged)])
    return buf.getvalue()


def csv_body(text, drop=("seconds",)):
    """CSV rows without the header and without wall-clock columns."""
    rows = list(csv.reader(io.StringIO(text)))
    keep = [i for i, name in enumerate(rows[0]) if name not in drop]
    return [[row[i] for i in keep] for row in rows[1:]]


def run(config, quiet=True):
    """Train according to ``config``; writes ``<out>.jsonl`` and ``<out>.csv``
    when ``config.out`` is set."""
    config.validate()
    ds, shape = load_dataset(config)
    net = build_network(config.architecture, _input_shape_for(config, shape),
                        config.activation, config.seed)
    log = train(net, ds, config)
    if config.out:
        with open(config.out + ".jsonl", "w") as fh:
            fh.write(run_log_jsonl(log))
        with open(config.out + ".csv", "w") as fh:
            fh.write(run_log_csv(log))
    if not quiet:
        sys.stdout.write(run_log_csv(log))
    return log


def parse_oracle(name):
    """``backprop``, ``proxprop_exact`` or ``proxprop_cg<k>`` to config fields."""
    if name in ("backprop", "proxprop_exact"):
        return {"oracle": name}
    m = re.fullmatch(r"proxprop_cg(\d*)", name)
    if not m:
        raise ConfigError(f"unknown oracle {name!r}")
    fields = {"oracle": "proxprop_cg"}
    if m.group(1):
        fields["cg_iters"] = int(m.group(1))
    return fields


@dataclasses.dataclass
class SweepTable:
    taus: List[float]
    oracles: List[str]
    cells: dict  # (oracle, tau) -> RunLog, or None when the run raised

    def value(self, oracle, tau):
        log = self.cells[(oracle, tau)]
        if log is None or log.diverged:
            return None
        return log.final_loss

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["tau"] + [repr(t) for t in self.taus])
        for oracle in self.oracles:
            row = [oracle]
            for tau in self.taus:
                v = self.value(oracle, tau)
                row.append("DIVERGED" if v is None else repr(v))
            writer.writerow(row)
        return buf.getvalue()


def stability_sweep(base, taus, oracles, workers=1, dataset=None):
    """Final full-batch loss for every (tau, oracle) cell."""
    taus = list(taus)
    oracles = list(oracles)
    if not taus or not oracles:
        raise ConfigError("sweep grids must be nonempty")
    base.validate()
    if dataset is None:
        dataset = load_dataset(base)
    ds, shape = dataset

    def cell(key):
        oracle, tau = key
        cfg = dataclasses.replace(base, tau=tau, out=None, **parse_oracle(oracle))
        try:
            net = build_network(cfg.architecture, _input_shape_for(cfg, shape),
                                cfg.activation, cfg.seed)
            return key, train(net, ds, cfg)
        except (ArithmeticError, ValueError):
            return key, None

    keys = [(o, t) for o in oracles for t in taus]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = dict(pool.map(cell, keys))
    else:
        results = dict(map(cell, keys))
    return SweepTable(taus, oracles, results)


# ---------------------------------------------------------------------------
# verification suite


def verify_suite(seeds=50, out=sys.stdout):
    """Quick versions of the property checks; returns True when all pass."""
    from .network import loss_and_grad
    from .prox import ProxConfig, proxprop_directions
    from .verify import descent_report, gradient_check, prop1_harness, random_net, spectral_bounds

    ok = True
    report = prop1_harness(range(seeds))
    for line in report.to_records():
        print(line, file=out)
    ok &= report.passed

    worst = 0.0
    for seed in range(min(seeds, 10)):
        net, X, y, _ = random_net(seed)
        worst = max(worst, gradient_check(net, X, y, max_coords=50, seed=seed))
    print(f"check=gradient seeds={min(seeds, 10)} max_rel_err={worst:.6g} "
          f"status={'PASS' if worst <= 1e-5 else 'FAIL'}", file=out)
    ok &= worst <= 1e-5

    for seed in range(min(seeds, 10)):
        net, X, y, _ = random_net(seed)
        grads = loss_and_grad(net, X, y)
        for config in (ProxConfig.exact(1.0), ProxConfig.cg(1), ProxConfig.cg(3)):
            bounds = spectral_bounds(net, X, config.tau_theta) if config.mode == "exact" else None
            rep = descent_report(proxprop_directions(net, X, y, config), grads, bounds)
            for line in rep.to_records(seed=seed, oracle=config.name):
                print(line, file=out)
            ok &= rep.ok
    return bool(ok)


# ---------------------------------------------------------------------------
# argument handling


def read_config_file(path):
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _coerce(field, value):
    if value is None or value == "None":
        return None
    default = field.default
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if field.name in ("tau_theta",):
        return float(value)
    if field.name in ("val_size",):
        return int(value)
    return str(value)


def config_from_args(args):
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
    for name in fields:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    if "oracle" in values:
        # a suffix such as proxprop_cg5 fixes cg_iters
        values.update(parse_oracle(str(values["oracle"])))
    kwargs = {name: _coerce(fields[name], value) for name, value in values.items()}
    return TrainConfig(**kwargs).validate()


def _add_config_flags(parser):
    parser.add_argument("--config", help="file of key = value lines")
    for f in dataclasses.fields(TrainConfig):
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                            help=f"(default: {f.default})")


def make_parser():
    parser = argparse.ArgumentParser(prog="proxprop", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p = sub.add_parser("sweep", help="step-size stability table")
    _add_config_flags(p)
    p.add_argument("--taus", required=True, help="comma-separated step sizes")
    p.add_argument("--oracles", default="backprop,proxprop_cg3")
    p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("verify", help="run the property checks")
    p.add_argument("--seeds", type=int, default=50)
    p = sub.add_parser("probe-conditioning", help="extreme eigenvalues of the data Gram matrix")
    _add_config_flags(p)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return EXIT_OK if verify_suite(args.seeds) else EXIT_ERROR
        config = config_from_args(args)
        if args.command == "train":
            log = run(config, quiet=config.out is not None)
            return EXIT_DIVERGED if log.diverged else EXIT_OK
        if args.command == "sweep":
            taus = [float(t) for t in args.taus.split(",")]
            oracles = [o.strip() for o in args.oracles.split(",") if o.strip()]
            table = stability_sweep(config, taus, oracles, args.workers)
            text = table.to_csv()
            if config.out:
                with open(config.out, "w") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        from .verify import gram_conditioning
        ds, _ = load_dataset(config)
        for line in gram_conditioning(ds.X_train).to_records(dataset=config.dataset,
                                                              samples=ds.n_train):
            print(line)
        return EXIT_OK
    except (OSError, ConfigError, FormatError) as exc:
        print(f"proxprop: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
