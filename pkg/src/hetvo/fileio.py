"""Readers and writers for every on-disk format used by the pipeline.

All text formats are ASCII, ``\\n`` line endings, and write reals with
``format(x, ".17g")`` so that parsing recovers the exact float64 value.
The byte-level layouts are documented in ``docs/formats.md``.
"""

from __future__ import annotations

import io
import logging
import struct

import numpy as np

from . import covariance as cov
from .exceptions import FormatError, LengthMismatch, MalformedLine, NonRigidRotation
from .geometry import Pose, _project_to_so3, quaternion_to_rotation, rotation_to_quaternion
from .loss import GaussianPrediction
from .metrics import MetricsReport, Trajectory
from .posegraph import GraphEdge, GraphNode, OptimizeStats, PoseGraph
from .regressor import RegressorModel
from .synthetic import SyntheticDataset

log = logging.getLogger(__name__)

RIGID_TOL = 1e-6
REJECT_TOL = 1e-2
SAMPLES_MAGIC = "#hetvo-samples v1"
PREDICTIONS_MAGIC = "#hetvo-predictions v1"
CHECKPOINT_MAGIC = b"HETVOCK1"
CHECKPOINT_END = b"HETVOEND"
CHECKPOINT_VERSION = 1
GRAPH_INFO_ENTRIES = 21


def fmt(x) -> str:
    """Shortest lossless decimal form used in every text file."""
    return format(float(x), ".17g")


def _join(values, sep=" "):
    return sep.join(fmt(v) for v in values)


def _floats(tokens, lineno, what):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise MalformedLine(lineno, f"non-numeric {what}") from None


def _open_text(source):
    if hasattr(source, "read"):
        return source.read()
    with open(source, encoding="ascii") as fh:
        return fh.read()


def _write_text(dest, text):
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)


# --- KITTI poses ---------------------------------------------------------------


def _rigid_rotation(R, lineno):
    err = np.abs(R.T @ R - np.eye(3)).max()
    det = np.linalg.det(R)
    if err > REJECT_TOL or det <= 0:
        raise NonRigidRotation(f"line {lineno}: rotation block is not a rotation (orthonormality error {err:.3g}, det {det:.3g})")
    if err > RIGID_TOL:
        log.warning("line %d: rotation off by %.3g, re-orthonormalized", lineno, err)
        return _project_to_so3(R)
    return R


def parse_kitti_poses(source) -> Trajectory:
    """Absolute poses from KITTI lines: 12 reals, row-major ``[R | t]``.

    Blank lines are skipped; pose ``k`` is the ``k``-th non-blank line.
    Rotations within ``1e-6`` of orthonormal are kept as is, those up to
    ``1e-2`` off are projected back to SO(3) with a warning and anything
    worse raises :class:`NonRigidRotation`.
    """
    poses = []
    for lineno, line in enumerate(_open_text(source).splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise MalformedLine(lineno, f"expected 12 values, found {len(tokens)}")
        M = np.array(_floats(tokens, lineno, "pose entry")).reshape(3, 4)
        if not np.all(np.isfinite(M)):
            raise MalformedLine(lineno, "non-finite pose entry")
        poses.append(Pose(_rigid_rotation(M[:, :3], lineno), M[:, 3]))
    if len(poses) < 2:
        raise FormatError("a KITTI pose file needs at least two poses")
    return Trajectory(poses)


def format_kitti_poses(poses) -> str:
    lines = []
    for p in poses:
        M = np.hstack([p.rotation, p.translation[:, None]])
        lines.append(_join(M.ravel()))
    return "\n".join(lines) + "\n"


def write_kitti_poses(dest, poses):
    _write_text(dest, format_kitti_poses(poses))


# --- sectioned CSV files -------------------------------------------------------


def _pose_fields(p: Pose):
    return list(p.translation) + list(rotation_to_quaternion(p.rotation))


def _pose_from_fields(v, where):
    v = np.asarray(v, dtype=float)
    q = v[3:7]
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > 1e-9:
        raise FormatError(f"{where}: quaternion norm {norm!r} is not 1 within 1e-9")
    return Pose(quaternion_to_rotation(q), v[:3])


def _split_sections(text, magic, path_hint):
    lines = text.splitlines()
    if not lines or lines[0].strip() != magic:
        found = lines[0].strip() if lines else "<empty file>"
        raise FormatError(f"{path_hint}: header {found!r} does not match {magic!r}")
    sections, current = {}, None
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("#section "):
            current = line[len("#section ") :].strip()
            sections[current] = []
        elif line.strip() == "#end":
            sections["end"] = []
            current = None
        elif current is None:
            raise MalformedLine(lineno, "content outside a section")
        else:
            sections[current].append((lineno, line))
    return sections


def _require(sections, names, path_hint):
    for name in names:
        if name not in sections:
            raise FormatError(f"{path_hint}: truncated or incomplete file, missing section '{name}'")


def _parse_meta(rows):
    meta = {}
    for lineno, line in rows:
        if "=" not in line:
            raise MalformedLine(lineno, "meta lines must be key=value")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def _meta_int(meta, key, path_hint):
    try:
        return int(meta[key])
    except KeyError:
        raise FormatError(f"{path_hint}: meta key '{key}' missing") from None
    except ValueError:
        raise FormatError(f"{path_hint}: meta key '{key}' is not an integer") from None


def _parse_records(rows, columns, n_rows, path_hint):
    if not rows:
        raise FormatError(f"{path_hint}: section 'records' has no column header")
    lineno, head = rows[0]
    if head.split(",") != columns:
        raise MalformedLine(lineno, "column header does not match the schema declared in meta")
    body = rows[1:]
    if len(body) != n_rows:
        raise FormatError(f"{path_hint}: section 'records' holds {len(body)} rows, meta declares {n_rows}")
    table = np.empty((n_rows, len(columns)))
    for k, (lineno, line) in enumerate(body):
        tokens = line.split(",")
        if len(tokens) != len(columns):
            raise MalformedLine(lineno, f"expected {len(columns)} columns, found {len(tokens)}")
        table[k] = _floats(tokens, lineno, "field")
        if table[k, 0] != k:
            raise MalformedLine(lineno, f"index {tokens[0]} out of sequence (expected {k})")
    return table


def _records_text(columns, table):
    out = [",".join(columns)]
    for k, row in enumerate(table):
        out.append(",".join([str(k)] + [fmt(v) for v in row[1:]]))
    return out


POSE_SUFFIXES = ("tx", "ty", "tz", "qx", "qy", "qz", "qw")


def sample_columns(feature_dim, has_gt, has_oracle, n_alpha=21):
    cols = ["index"] + [f"f{i}" for i in range(feature_dim)] + [f"e{i}" for i in range(6)]
    cols += [f"vo_{s}" for s in POSE_SUFFIXES]
    if has_gt:
        cols += [f"gt_{s}" for s in POSE_SUFFIXES]
    if has_oracle:
        cols += [f"mu{i}" for i in range(6)] + [f"alpha{i}" for i in range(n_alpha)]
    return cols


def dataset_to_table(ds: SyntheticDataset):
    """``(meta, columns, table)`` exactly as :func:`write_samples` stores them."""
    has_gt = ds.gt_relative is not None and len(ds.gt_relative) == len(ds)
    has_oracle = ds.has_oracle()
    F = np.asarray(ds.features, dtype=float)
    blocks = [np.arange(len(ds), dtype=float)[:, None], F, np.asarray(ds.errors, dtype=float)]
    blocks.append(np.array([_pose_fields(p) for p in ds.vo_relative]))
    if has_gt:
        blocks.append(np.array([_pose_fields(p) for p in ds.gt_relative]))
    if has_oracle:
        blocks += [np.asarray(ds.oracle_mu, dtype=float), np.asarray(ds.oracle_params, dtype=float)]
    table = np.hstack(blocks)
    start = ds.gt_poses[0] if ds.gt_poses else Pose.identity()
    meta = {
        "n_samples": str(len(ds)),
        "feature_dim": str(F.shape[1]),
        "error_mode": ds.error_mode,
        "has_gt": str(int(has_gt)),
        "has_oracle": str(int(has_oracle)),
        "oracle_kind": "ldl",
        "start": _join(_pose_fields(start), ","),
    }
    for k in sorted(ds.meta):
        meta[f"x_{k}"] = str(ds.meta[k])
    return meta, sample_columns(F.shape[1], has_gt, has_oracle), table


def format_samples(ds: SyntheticDataset) -> str:
    meta, columns, table = dataset_to_table(ds)
    out = [SAMPLES_MAGIC, "#section meta"] + [f"{k}={v}" for k, v in meta.items()]
    out += ["#section records"] + _records_text(columns, table) + ["#end"]
    return "\n".join(out) + "\n"


def write_samples(dest, ds: SyntheticDataset):
    _write_text(dest, format_samples(ds))


def read_sample_table(source):
    """``(meta, columns, table)`` without building poses; numerics are bit-exact."""
    hint = source if isinstance(source, str) else "sample file"
    sections = _split_sections(_open_text(source), SAMPLES_MAGIC, hint)
    _require(sections, ("meta", "records", "end"), hint)
    meta = _parse_meta(sections["meta"])
    n = _meta_int(meta, "n_samples", hint)
    columns = sample_columns(_meta_int(meta, "feature_dim", hint), meta.get("has_gt") == "1", meta.get("has_oracle") == "1")
    return meta, columns, _parse_records(sections["records"], columns, n, hint)


def read_samples(source) -> SyntheticDataset:
    """Dataset from a sample file.

    Absolute ground truth is rebuilt by chaining the stored ``gt`` relative
    poses from the ``start`` pose in meta.
    """
    from .geometry import integrate

    hint = source if isinstance(source, str) else "sample file"
    meta, columns, table = read_sample_table(source)
    col = {c: i for i, c in enumerate(columns)}
    fd = _meta_int(meta, "feature_dim", hint)
    F = table[:, 1 : 1 + fd].copy()
    E = table[:, col["e0"] : col["e5"] + 1].copy()
    vo = [_pose_from_fields(r[col["vo_tx"] : col["vo_qw"] + 1], f"{hint} row {k} vo") for k, r in enumerate(table)]
    gt_rel, gt_abs = None, []
    if meta.get("has_gt") == "1":
        gt_rel = [_pose_from_fields(r[col["gt_tx"] : col["gt_qw"] + 1], f"{hint} row {k} gt") for k, r in enumerate(table)]
        start = _pose_from_fields(_floats(meta.get("start", "").split(","), 0, "start pose"), f"{hint} start")
        gt_abs = integrate(gt_rel, start)
    mu = params = None
    if meta.get("has_oracle") == "1":
        mu = table[:, col["mu0"] : col["mu5"] + 1].copy()
        params = table[:, col["alpha0"] : col["alpha20"] + 1].copy()
    error_mode = meta.get("error_mode", "right")
    if error_mode not in ("right", "left"):
        raise FormatError(f"{hint}: unknown error_mode {error_mode!r}")
    extra = {k[2:]: v for k, v in meta.items() if k.startswith("x_")}
    return SyntheticDataset(gt_abs, gt_rel, vo, F, E, mu, params, error_mode, extra)


# --- predictions ---------------------------------------------------------------


def prediction_columns():
    return ["index"] + [f"mu{i}" for i in range(6)] + [f"alpha{i}" for i in range(cov.n_params(6))]


def format_predictions(pred: GaussianPrediction) -> str:
    mu = np.atleast_2d(pred.mu)
    alpha = np.atleast_2d(pred.cov.values)
    table = np.hstack([np.arange(len(mu), dtype=float)[:, None], mu, alpha])
    out = [PREDICTIONS_MAGIC, "#section meta", f"n_samples={len(mu)}", f"cov_kind={pred.kind}"]
    out += ["#section records"] + _records_text(prediction_columns(), table) + ["#end"]
    return "\n".join(out) + "\n"


def write_predictions(dest, pred: GaussianPrediction):
    _write_text(dest, format_predictions(pred))


def read_predictions(source) -> GaussianPrediction:
    hint = source if isinstance(source, str) else "prediction file"
    sections = _split_sections(_open_text(source), PREDICTIONS_MAGIC, hint)
    _require(sections, ("meta", "records", "end"), hint)
    meta = _parse_meta(sections["meta"])
    kind = meta.get("cov_kind")
    if kind not in cov.KINDS:
        raise FormatError(f"{hint}: cov_kind must be one of {cov.KINDS}, got {kind!r}")
    table = _parse_records(sections["records"], prediction_columns(), _meta_int(meta, "n_samples", hint), hint)
    return GaussianPrediction(table[:, 1:7].copy(), cov.CovarianceParams(kind, table[:, 7:].copy()))


# --- checkpoints ---------------------------------------------------------------

_HEAD = struct.Struct("<8sIBBBBdI")


def checkpoint_bytes(model: RegressorModel) -> bytes:
    """Little-endian binary checkpoint; see the format doc for the layout."""
    dims = [model.weights[0].shape[0]] + [W.shape[1] for W in model.weights]
    has_std = model.x_mean is not None and model.x_scale is not None
    has_out = model.out_shift is not None
    buf = io.BytesIO()
    buf.write(
        _HEAD.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            cov.KINDS.index(model.cov_kind),
            int(model.zero_mean),
            int(has_std),
            int(has_out),
            float(model.dropout_rate),
            len(model.weights),
        )
    )
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    for W, b in zip(model.weights, model.biases):
        buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    if has_std:
        buf.write(np.ascontiguousarray(model.x_mean, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(model.x_scale, dtype="<f8").tobytes())
    if has_out:
        buf.write(np.ascontiguousarray(model.out_shift, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(model.out_scale, dtype="<f8").tobytes())
    buf.write(CHECKPOINT_END)
    return buf.getvalue()


def model_from_bytes(data: bytes) -> RegressorModel:
    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"checkpoint truncated in section '{what}'")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    magic, version, kind, zero_mean, has_std, has_out, dropout, n_layers = _HEAD.unpack(take(_HEAD.size, "header"))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    if kind >= len(cov.KINDS) or n_layers < 1:
        raise FormatError("checkpoint header is corrupt")
    dims = struct.unpack(f"<{n_layers + 1}I", take(4 * (n_layers + 1), "dimensions"))
    weights, biases = [], []
    for k in range(n_layers):
        a, b = dims[k], dims[k + 1]
        weights.append(np.frombuffer(take(8 * a * b, f"layer {k} weights"), dtype="<f8").reshape(a, b).astype(float))
        biases.append(np.frombuffer(take(8 * b, f"layer {k} biases"), dtype="<f8").astype(float))
    x_mean = x_scale = None
    if has_std:
        x_mean = np.frombuffer(take(8 * dims[0], "standardization mean"), dtype="<f8").astype(float)
        x_scale = np.frombuffer(take(8 * dims[0], "standardization scale"), dtype="<f8").astype(float)
    out_shift = out_scale = None
    if has_out:
        out_shift = np.frombuffer(take(8 * dims[-1], "output shift"), dtype="<f8").astype(float)
        out_scale = np.frombuffer(take(8 * dims[-1], "output scale"), dtype="<f8").astype(float)
    if take(len(CHECKPOINT_END), "end marker") != CHECKPOINT_END:
        raise FormatError("checkpoint end marker missing")
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint end marker")
    try:
        return RegressorModel(weights, biases, cov.KINDS[kind], dropout, bool(zero_mean), x_mean, x_scale, out_shift, out_scale)
    except ValueError as exc:
        raise FormatError(f"checkpoint describes an invalid model: {exc}") from None


def save_checkpoint(path, model: RegressorModel):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> RegressorModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# --- pose graphs ---------------------------------------------------------------


def format_graph(graph: PoseGraph) -> str:
    iu = np.triu_indices(6)
    lines = [f"NODE {n.id} {_join(_pose_fields(n.pose))}" for n in graph.nodes]
    lines += [f"FIX {n.id}" for n in graph.nodes if n.fixed]
    for e in graph.edges:
        lines.append(f"EDGE {e.frm} {e.to} {_join(_pose_fields(e.measurement))} {_join(e.information[iu])}")
    return "\n".join(lines) + "\n"


def write_graph(dest, graph: PoseGraph):
    _write_text(dest, format_graph(graph))


def _int(token, lineno):
    try:
        return int(token)
    except ValueError:
        raise MalformedLine(lineno, f"expected an integer id, found {token!r}") from None


def parse_graph(source) -> PoseGraph:
    """Graph from ``NODE`` / ``EDGE`` / ``FIX`` lines; ``#`` starts a comment."""
    nodes, edges, fixed = {}, [], set()
    iu = np.triu_indices(6)
    for lineno, line in enumerate(_open_text(source).splitlines(), start=1):
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue
        tag = tokens[0]
        if tag == "NODE":
            if len(tokens) != 9:
                raise MalformedLine(lineno, f"NODE needs 8 fields, found {len(tokens) - 1}")
            i = _int(tokens[1], lineno)
            if i in nodes:
                raise MalformedLine(lineno, f"duplicate node id {i}")
            nodes[i] = _pose_from_fields(_floats(tokens[2:], lineno, "node pose"), f"line {lineno}")
        elif tag == "EDGE":
            if len(tokens) != 3 + 7 + GRAPH_INFO_ENTRIES:
                raise MalformedLine(lineno, f"EDGE needs {2 + 7 + GRAPH_INFO_ENTRIES} fields, found {len(tokens) - 1}")
            a, b = _int(tokens[1], lineno), _int(tokens[2], lineno)
            vals = _floats(tokens[3:], lineno, "edge entry")
            info = np.zeros((6, 6))
            info[iu] = vals[7:]
            info = info + np.triu(info, 1).T
            try:
                edges.append(GraphEdge(a, b, _pose_from_fields(vals[:7], f"line {lineno}"), info))
            except ValueError as exc:
                raise MalformedLine(lineno, str(exc)) from None
        elif tag == "FIX":
            if len(tokens) != 2:
                raise MalformedLine(lineno, "FIX takes one node id")
            fixed.add(_int(tokens[1], lineno))
        else:
            raise MalformedLine(lineno, f"unknown record type {tag!r}")
    if not nodes:
        raise FormatError("graph file has no nodes")
    if not fixed:
        fixed = {min(nodes)}
    try:
        return PoseGraph([GraphNode(i, nodes[i], i in fixed) for i in sorted(nodes)], edges)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


# --- reports -------------------------------------------------------------------


def report_items(rep: MetricsReport):
    """Ordered ``(key, value)`` pairs of the key-value report."""
    items = [("ate_trans_m", fmt(rep.ate_trans)), ("ate_rot_deg", fmt(rep.ate_rot))]
    for s in rep.segment_stats:
        p = f"segment.{s.fraction:g}"
        items += [
            (f"{p}.length_m", fmt(s.length)),
            (f"{p}.count", str(s.count)),
            (f"{p}.trans_pct_mean", fmt(s.trans_pct_mean)),
            (f"{p}.trans_pct_std", fmt(s.trans_pct_std)),
            (f"{p}.rot_mdeg_per_m_mean", fmt(s.rot_millideg_per_m_mean)),
            (f"{p}.rot_mdeg_per_m_std", fmt(s.rot_millideg_per_m_std)),
        ]
    for n in sorted(rep.coverage):
        per_dim, mean = rep.coverage[n]
        items.append((f"coverage.{n}sigma.mean", fmt(mean)))
        items.append((f"coverage.{n}sigma.per_dim", _join(per_dim, ",")))
    if rep.mean_ll is not None:
        items.append(("mean_log_likelihood", fmt(rep.mean_ll)))
    for k in sorted(rep.meta):
        items.append((f"meta.{k}", str(rep.meta[k]).lower() if isinstance(rep.meta[k], bool) else str(rep.meta[k])))
    return items


def format_key_values(items) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items)


def parse_key_values(source) -> dict:
    out = {}
    for lineno, line in enumerate(_open_text(source).splitlines(), start=1):
        if not line.strip():
            continue
        if " = " not in line:
            raise MalformedLine(lineno, "expected 'key = value'")
        k, v = line.split(" = ", 1)
        out[k] = v
    return out


def format_table(columns, rows) -> str:
    """Tab-separated table with a header row; reals use the lossless form."""
    out = ["\t".join(columns)]
    for row in rows:
        out.append("\t".join(v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else fmt(v)) for v in row))
    return "\n".join(out) + "\n"


def segment_table(est, gt, fractions):
    """Per-segment rows for distribution plots: one line per segment."""
    from .metrics import segment_errors_raw

    rows = []
    for f in fractions:
        length, raw = segment_errors_raw(est, gt, f)
        rows += [(format(f, "g"), i, j, length, t, r) for i, j, t, r in raw]
    return format_table(["fraction", "start", "end", "length_m", "trans_pct", "rot_mdeg_per_m"], rows)


def trajectory_table(gt, series) -> str:
    """Positions of ground truth and each named estimate, for top/side views."""
    gt = gt if isinstance(gt, Trajectory) else Trajectory(gt)
    cols = ["index", "gt_x", "gt_y", "gt_z"]
    pos = [gt.positions()]
    for name, traj in series:
        traj = traj if isinstance(traj, Trajectory) else Trajectory(traj)
        if len(traj) != len(gt):
            raise LengthMismatch(f"trajectory '{name}' has {len(traj)} poses, ground truth {len(gt)}")
        cols += [f"{name}_x", f"{name}_y", f"{name}_z"]
        pos.append(traj.positions())
    P = np.hstack(pos)
    return format_table(cols, [(k, *row) for k, row in enumerate(P)])


def stats_items(stats: OptimizeStats):
    return [
        ("iterations", str(stats.iterations)),
        ("initial_chi2", fmt(stats.initial_chi2)),
        ("final_chi2", fmt(stats.final_chi2)),
        ("converged", str(bool(stats.converged)).lower()),
        ("final_lambda", fmt(stats.final_lambda)),
        ("chi2_history", _join(stats.chi2_history, ",")),
    ]

