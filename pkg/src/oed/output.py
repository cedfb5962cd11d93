"""Atomic result files: CSV logs, the run manifest, ensemble summaries.

Every file is written to a temporary sibling and renamed into place, so a
crash never leaves a partial file behind.  Numbers are printed with 17
significant digits, which round-trips doubles exactly; together with the
fixed field order this makes repeated runs byte-identical.  The first
line of every file carries the config hash as a comment.
"""
from __future__ import annotations

import json
import os
import tempfile

import numpy as np

__all__ = [
    "write_csv",
    "write_json",
    "write_run_files",
    "write_summary",
    "read_csv",
]


def _fmt(x):
    return "%.17g" % float(x)


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_csv(path, header, rows, config_hash):
    """Write one log: hash comment, header row, then %.17g data rows."""
    lines = [f"# config_hash={config_hash}", ",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_json(path, payload, config_hash):
    payload = {"config_hash": config_hash, **payload}
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_csv(path):
    """Read back a log written by :func:`write_csv`.

    Returns ``(config_hash, header, array)`` where the array is float and
    empty logs come back with zero rows.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_hash="):
            raise ValueError(f"{path} is missing the config hash line")
        config_hash = first.split("=", 1)[1]
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    data = np.array([[float(v) for v in row] for row in rows], dtype=float)
    if data.size == 0:
        data = data.reshape(0, len(header))
    return config_hash, header, data


def _indexed(prefix, n):
    return [f"{prefix}{i + 1}" for i in range(n)]


def write_run_files(out_dir, log, config_hash):
    """Write the six per-run logs for one completed experiment.

    ``k`` counts applied controls starting at 1.  The weight and final
    likelihood tables grow with the ensemble size; the criterion log is
    nan on steps where no window was optimized (random mode, frozen
    tails) and -inf where optimization fell back to the unevaluated hot
    start.
    """
    t = log.us.shape[0]
    ks = np.arange(1, t + 1)
    m = log.us.shape[1]
    d = log.ys.shape[1]
    n, p = log.thetas.shape

    def with_k(table):
        return np.column_stack([ks, table])

    paths = {}

    def emit(name, header, rows):
        path = os.path.join(out_dir, name + ".csv")
        write_csv(path, header, rows, config_hash)
        paths[name] = path

    emit("inputs", ["k"] + _indexed("u", m), with_k(log.us))
    emit("outputs", ["k"] + _indexed("y", d), with_k(log.ys))
    emit("mle", ["k"] + _indexed("theta", p), with_k(log.mles))
    emit("weights", ["k"] + _indexed("w", n), with_k(log.weights))
    emit("criterion", ["k", "criterion"], with_k(log.criteria[:, None]))
    emit(
        "likelihood_final",
        _indexed("theta", p) + ["loglik"],
        np.column_stack([log.thetas, log.loglik_final]),
    )
    return paths


def write_summary(path, steps, mles_by_replicate, config_hash):
    """Per-step mean and standard deviation of the estimates.

    ``mles_by_replicate`` stacks the completed replicates, shape
    ``(R, T, p)``.  A single replicate reports zero deviation rather
    than nan.
    """
    stack = np.asarray(mles_by_replicate, dtype=float)
    if stack.ndim != 3 or stack.shape[1] != steps:
        raise ValueError("expected a (replicates, steps, params) stack")
    mean = stack.mean(axis=0)
    std = stack.std(axis=0, ddof=0)
    p = stack.shape[2]
    header = ["k"]
    for j in range(p):
        header += [f"mean_theta{j + 1}", f"std_theta{j + 1}"]
    cols = [np.arange(1, steps + 1)]
    for j in range(p):
        cols += [mean[:, j], std[:, j]]
    write_csv(path, header, np.column_stack(cols), config_hash)
