"""On-disk formats: CSV dataset bundles, geometry text files, YAML configs, model bundles.

Dataset directory layout (all CSV with a one-line header, ``%.17g`` floats)::

    imu.csv      stamp, wx, wy, wz, ax, ay, az
    truth.csv    stamp, qw, qx, qy, qz, vx, vy, vz, tx, ty, tz, bwx, bwy, bwz, bax, bay, baz
    uwb.csv      stamp, anchor_id, tag_id, range
    laser.csv    stamp, height
    geometry.txt see :func:`write_geometry`
    meta.yaml    free-form metadata (name, seed, kind)

Geometry file: one record per line, ``#`` starts a comment::

    anchor <id> <x> <y> <z>     # world frame, m
    tag    <id> <x> <y> <z>     # body frame, m
"""

from __future__ import annotations

import io as _io
import json
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from .baselines import UwbGeometry
from .lifting import FeatureConfig
from .simulator import ImuStream, LaserStream, SensorDataset, Trajectory, UwbStream

FMT = "%.17g"
IMU_HEADER = "stamp,wx,wy,wz,ax,ay,az"
TRUTH_HEADER = "stamp,qw,qx,qy,qz,vx,vy,vz,tx,ty,tz,bwx,bwy,bwz,bax,bay,baz"
UWB_HEADER = "stamp,anchor_id,tag_id,range"
LASER_HEADER = "stamp,height"


class DatasetIOError(OSError):
    pass


def quat_from_C(C) -> np.ndarray:
    """Scalar-first unit quaternions with ``qw >= 0``."""
    q = Rotation.from_matrix(C).as_quat()  # x, y, z, w
    q = np.atleast_2d(q)[:, [3, 0, 1, 2]]
    q[q[:, 0] < 0] *= -1
    return q


def C_from_quat(q) -> np.ndarray:
    q = np.atleast_2d(q)
    return Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()


def _write_csv(path: Path, header: str, data: np.ndarray, fmt=FMT):
    try:
        with open(path, "w") as fh:
            fh.write(header + "\n")
            if len(data):
                np.savetxt(fh, data, fmt=fmt, delimiter=",")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def _read_csv(path: Path, header: str) -> np.ndarray:
    ncol = len(header.split(","))
    try:
        with open(path) as fh:
            first = fh.readline().strip()
            if first.replace(" ", "") != header:
                raise DatasetIOError(f"{path}: expected header {header!r}, got {first!r}")
            body = fh.read()
    except FileNotFoundError as exc:
        raise DatasetIOError(f"missing dataset file {path}") from exc
    if not body.strip():
        return np.zeros((0, ncol))
    return np.loadtxt(_io.StringIO(body), delimiter=",", ndmin=2)


def write_geometry(path, geom: UwbGeometry):
    lines = ["# kind id x y z  (anchors: world frame, tags: body frame; metres)"]
    for aid, p in zip(geom.anchor_ids, geom.anchors):
        lines.append(f"anchor {aid} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    for tid, p in zip(geom.tag_ids, geom.tags):
        lines.append(f"tag {tid} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_geometry(path) -> UwbGeometry:
    anchors, tags, aids, tids = [], [], [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5 or parts[0] not in ("anchor", "tag"):
            raise ValueError(f"{path}:{n}: expected 'anchor|tag <id> <x> <y> <z>'")
        xyz = [float(v) for v in parts[2:]]
        if parts[0] == "anchor":
            aids.append(int(parts[1]))
            anchors.append(xyz)
        else:
            tids.append(int(parts[1]))
            tags.append(xyz)
    return UwbGeometry(np.array(anchors), np.array(tags), tuple(aids), tuple(tids))


def export_dataset(ds: SensorDataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_csv(d / "imu.csv", IMU_HEADER, np.column_stack([ds.imu.stamps, ds.imu.gyro, ds.imu.accel]))
    tr = ds.truth
    _write_csv(
        d / "truth.csv",
        TRUTH_HEADER,
        np.column_stack([tr.stamps, quat_from_C(tr.C) if len(tr) else np.zeros((0, 4)), tr.v, tr.t, tr.bias]),
    )
    uwb = np.column_stack([ds.uwb.stamps, ds.uwb.anchor, ds.uwb.tag, ds.uwb.ranges])
    _write_csv(d / "uwb.csv", UWB_HEADER, uwb, fmt=[FMT, "%d", "%d", FMT])
    _write_csv(d / "laser.csv", LASER_HEADER, np.column_stack([ds.laser.stamps, ds.laser.heights]))
    if ds.geometry is not None:
        write_geometry(d / "geometry.txt", ds.geometry)
    meta = {"name": ds.name, **{k: v for k, v in ds.meta.items()}}
    (d / "meta.yaml").write_text(yaml.safe_dump(meta, sort_keys=True))
    return d


def import_dataset(directory) -> SensorDataset:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetIOError(f"dataset directory {d} does not exist")
    imu = _read_csv(d / "imu.csv", IMU_HEADER)
    tr = _read_csv(d / "truth.csv", TRUTH_HEADER)
    uwb = _read_csv(d / "uwb.csv", UWB_HEADER)
    laser = _read_csv(d / "laser.csv", LASER_HEADER)
    meta = yaml.safe_load((d / "meta.yaml").read_text()) if (d / "meta.yaml").exists() else {}
    meta = meta or {}
    name = meta.pop("name", d.name)
    geom = read_geometry(d / "geometry.txt") if (d / "geometry.txt").exists() else None
    truth = Trajectory(
        tr[:, 0].copy(),
        C_from_quat(tr[:, 1:5]) if len(tr) else np.zeros((0, 3, 3)),
        tr[:, 5:8].copy(),
        tr[:, 8:11].copy(),
        tr[:, 11:17].copy(),
    )
    return SensorDataset(
        name,
        truth,
        ImuStream(imu[:, 0].copy(), imu[:, 1:4].copy(), imu[:, 4:7].copy()),
        UwbStream(uwb[:, 0].copy(), uwb[:, 1].astype(int), uwb[:, 2].astype(int), uwb[:, 3].copy()),
        LaserStream(laser[:, 0].copy(), laser[:, 1].copy()),
        geom,
        meta,
    )


def load_yaml(path) -> dict:
    try:
        with open(path) as fh:
            return yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise DatasetIOError(f"missing config file {path}") from exc


def save_feature_configs(path, configs: dict):
    """``configs`` maps sensor kind (``uwb``, ``laser``) to :class:`FeatureConfig`."""
    Path(path).write_text(yaml.safe_dump({k: c.to_dict() for k, c in configs.items()}, sort_keys=True))


def load_feature_configs(path) -> dict:
    return {k: FeatureConfig.from_dict(v) for k, v in load_yaml(path).items()}


def save_models(path, registry: dict):
    """Write a model registry to one ``.npz`` bundle.

    Per sensor ``<sid>``: arrays ``<sid>/D`` (m_y x n_x), ``<sid>/R``; the
    ``__meta__`` entry is JSON with sensor ids, taus, dims and feature configs.
    Arrays are stored in native float64, so loading is bit-exact.
    """
    arrays, meta = {}, {}
    for sid, m in registry.items():
        arrays[f"{sid}/D"] = m.D
        arrays[f"{sid}/R"] = m.R
        meta[sid] = {
            "n_x": int(m.D.shape[1]),
            "m_y": int(m.D.shape[0]),
            "tau_d": m.tau_d,
            "tau_r": m.tau_r,
            "n_samples": m.n_samples,
            "config": m.config.to_dict(),
        }
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_models(path) -> dict:
    from .learner import LearnedModel

    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        out = {}
        for sid, m in meta.items():
            out[sid] = LearnedModel(
                sensor_id=sid,
                D=z[f"{sid}/D"].copy(),
                R=z[f"{sid}/R"].copy(),
                tau_d=m["tau_d"],
                tau_r=m["tau_r"],
                config=FeatureConfig.from_dict(m["config"]),
                n_samples=m.get("n_samples", 0),
            )
    return out


TRAJ_HEADER = (
    "stamp,tx,ty,tz,vx,vy,vz,qw,qx,qy,qz,bwx,bwy,bwz,bax,bay,baz,"
    + ",".join(f"P{i}" for i in range(15))
)


def write_trajectory(path, run, nees=None):
    """Filter output: stamp, t, v, quaternion, bias, diag(P) and optional per-step NEES."""
    cols = [
        run.stamps,
        run.t,
        run.v,
        quat_from_C(run.C),
        run.bias,
        np.einsum("nii->ni", run.P),
    ]
    header = TRAJ_HEADER
    if nees is not None:
        cols.append(np.asarray(nees))
        header += ",nees"
    _write_csv(Path(path), header, np.column_stack(cols))


def read_trajectory(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip()
    return _read_csv(Path(path), header)
