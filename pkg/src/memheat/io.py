"""Trajectory files, CSV side outputs and run manifests.

Binary trajectory layout (little-endian throughout)::

    8s   magic  b"MEMHEAT\\x00"
    u32  format version
    u32  n_modes
    u32  n_times
    f64  dt
    f64  eps
    u64  seed
    u64  path index
    32s  sha256 digest of the configuration
    f64[n_times * n_modes]  coefficients, row-major (time major)
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import time
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError

MAGIC = b"MEMHEAT\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIIIddQQ32s")


def write_trajectory(path, traj):
    meta = traj.metadata
    digest = bytes.fromhex(meta.get("config_hash", "0" * 64))
    n_times, n_modes = traj.states.shape
    header = _HEADER.pack(MAGIC, VERSION, n_modes, n_times, traj.dt, float(meta.get("eps", 0.0)),
                          int(meta.get("seed", 0)), int(meta.get("path", 0)), digest)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())
    return Path(path)


def read_trajectory(path):
    """Returns ``(header dict, times, states)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ConfigurationError(f"{path}: truncated header", field="trajectory")
    magic, version, n_modes, n_times, dt, eps, seed, idx, digest = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ConfigurationError(f"{path}: not a trajectory file", field="trajectory")
    if version != VERSION:
        raise ConfigurationError(f"{path}: unsupported format version {version}", field="trajectory")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != n_times * n_modes:
        raise ConfigurationError(f"{path}: expected {n_times * n_modes} values, found {body.size}",
                                 field="trajectory")
    header = dict(version=version, n_modes=n_modes, n_times=n_times, dt=dt, eps=eps, seed=seed,
                  path=idx, config_hash=digest.hex())
    return header, dt * np.arange(n_times), body.reshape(n_times, n_modes).astype(float)


def write_csv(path, header, rows, comment=None):
    """CSV with an optional leading ``# ...`` provenance line."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
    return Path(path)


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return x


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    return rows[0], rows[1:]


def provenance(meta):
    return f"seed={meta.get('seed')} eps={meta.get('eps')} config={meta.get('config_hash', '')}"


def write_diagnostics(path, traj):
    d = traj.diagnostics
    jumps = d.get("jumps", np.zeros(traj.times.size, dtype=int))
    rows = zip(traj.times, d["l2sq"], d["h1sq"], d["lqq"], jumps)
    return write_csv(path, ["t", "l2sq", "h1sq", "lqq", "jumps"], rows, provenance(traj.metadata))


def write_controls(prefix, controls):
    """Paired CSVs ``<prefix>_f.csv`` (time x noise modes) and ``<prefix>_g.csv``
    (time x mark cells, first data row holds the cell nodes, second the cell masses)."""
    prefix = Path(prefix)
    out = []
    n = None if controls.f is None else controls.f.shape[0]
    if controls.f is not None:
        t = controls.dt * np.arange(n)
        rows = ([ti, *fi] for ti, fi in zip(t, controls.f))
        out.append(write_csv(prefix.with_name(prefix.name + "_f.csv"),
                             ["t"] + [f"f{k + 1}" for k in range(controls.f.shape[1])], rows))
    if controls.g is not None:
        mg = controls.mark_grid
        t = controls.dt * np.arange(controls.g.shape[0])
        rows = [["node", *mg.nodes], ["mass", *mg.weights]]
        rows += [[ti, *gi] for ti, gi in zip(t, controls.g)]
        out.append(write_csv(prefix.with_name(prefix.name + "_g.csv"),
                             ["t"] + [f"c{c + 1}" for c in range(mg.n_cells)], rows))
    return out


def read_controls(prefix, cfg):
    from .ldp import ControlPair

    prefix = Path(prefix)
    f = g = None
    fp = prefix.with_name(prefix.name + "_f.csv")
    gp = prefix.with_name(prefix.name + "_g.csv")
    if fp.exists():
        _, rows = read_csv(fp)
        f = np.array([[float(x) for x in r[1:]] for r in rows])
    if gp.exists():
        _, rows = read_csv(gp)
        g = np.array([[float(x) for x in r[1:]] for r in rows[2:]])
    if f is None and g is None:
        raise ConfigurationError(f"no control files at {prefix}_f.csv / {prefix}_g.csv", field="controls.csv")
    return ControlPair.for_config(cfg, f=f, g=g)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Record of one run. Outputs are appended as they are written; one writer."""

    def __init__(self, directory, subcommand, run_config, version):
        self.dir = Path(directory)
        self.data = dict(
            subcommand=subcommand,
            version=version,
            config_hash=run_config.sim.config_hash(),
            config=run_config.sections,
            seed=run_config.seed,
            eps=run_config.eps,
            ensemble=run_config.ensemble,
            started=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            outputs=[],
            timings={},
            summary={},
            status="running",
        )
        self._t0 = time.perf_counter()

    def add_output(self, path, kind):
        path = Path(path)
        self.data["outputs"].append(dict(path=path.name, kind=kind, sha256=sha256_file(path)))

    def timing(self, name, seconds):
        self.data["timings"][name] = round(float(seconds), 6)

    def finish(self, status, **summary):
        self.data["status"] = status
        self.data["summary"].update(summary)
        self.timing("total", time.perf_counter() - self._t0)
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def load_manifest(path):
    return json.loads(Path(path).read_text())
