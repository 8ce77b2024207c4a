"""On-disk formats: PLY clouds, PNG images, dataset directories, JSONL logs,
key-value configs and training checkpoints."""
from __future__ import annotations

import dataclasses
import io
import json
import os
import re
import warnings
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import Camera, GaussianCloud
from .data import (Frame, InconsistencySpec, OrbitSpec, PseudoDataset, SceneSpec, orbit_cameras,
                   render_label)
from .errors import (ConfigError, HeaderError, IntegrityError, ParseError, TruncatedPayloadError,
                     VersionError)

# ---------------------------------------------------------------- PLY

PLY_PROPERTIES = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                  "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")
_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "u2", "uint16": "u2", "short": "i2", "int16": "i2",
    "uint": "u4", "uint32": "u4", "int": "i4", "int32": "i4",
}
_ENDIAN = {"binary_little_endian": "<", "binary_big_endian": ">"}


def _ply_header(n: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {p}" for p in PLY_PROPERTIES]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def cloud_to_ply_bytes(cloud: GaussianCloud) -> bytes:
    table = np.concatenate([
        cloud.positions, cloud.colors_dc, cloud.opacity_logits[:, None],
        cloud.log_scales, cloud.rotations,
    ], axis=1)
    return _ply_header(len(cloud)) + table.astype("<f4").tobytes()


def save_cloud(path, cloud: GaussianCloud) -> None:
    """Binary little-endian PLY with opacity as logit and scales as logs."""
    _atomic_write(Path(path), cloud_to_ply_bytes(cloud))


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise HeaderError("missing 'ply' magic or 'end_header'")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise HeaderError("header not terminated by newline")
    try:
        text = data[:end].decode("ascii")
    except UnicodeDecodeError:
        raise HeaderError("header is not ASCII") from None
    endian, count, props, element = None, None, [], None
    for line in text.splitlines()[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3:
                raise HeaderError(f"bad format line: {line!r}")
            if tok[1] == "ascii":
                raise HeaderError("ascii PLY is not supported")
            if tok[1] not in _ENDIAN:
                raise HeaderError(f"unknown PLY format {tok[1]!r}")
            if tok[2] != "1.0":
                raise VersionError(f"unsupported PLY version {tok[2]!r}")
            endian = _ENDIAN[tok[1]]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise HeaderError(f"bad element line: {line!r}")
            element = tok[1]
            if element == "vertex":
                if count is not None:
                    raise HeaderError("duplicate vertex element")
                count = int(tok[2])
            elif int(tok[2]) != 0:
                raise HeaderError(f"unsupported element {element!r}")
        elif tok[0] == "property":
            if element != "vertex":
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise HeaderError(f"unsupported property line: {line!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise HeaderError(f"unexpected header line: {line!r}")
    if endian is None:
        raise HeaderError("missing format line")
    if count is None:
        raise HeaderError("missing 'element vertex' line")
    names = [p for p, _ in props]
    missing = [p for p in PLY_PROPERTIES if p not in names]
    if missing:
        raise HeaderError(f"missing properties: {', '.join(missing)}")
    if len(set(names)) != len(names):
        raise HeaderError("duplicate property names")
    dtype = np.dtype([(p, endian + t) for p, t in props])
    return count, dtype, nl + 1


def cloud_from_ply_bytes(data: bytes) -> GaussianCloud:
    count, dtype, start = _parse_header(data)
    payload = len(data) - start
    if payload != count * dtype.itemsize:
        raise TruncatedPayloadError(
            f"header declares {count} vertices ({count * dtype.itemsize} bytes), payload has {payload} bytes")
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=start)

    def cols(*names):
        return np.stack([rec[n].astype(np.float64) for n in names], axis=1) if count else np.zeros((0, len(names)))

    return GaussianCloud(
        positions=cols("x", "y", "z"),
        log_scales=cols("scale_0", "scale_1", "scale_2"),
        rotations=cols("rot_0", "rot_1", "rot_2", "rot_3"),
        colors_dc=cols("f_dc_0", "f_dc_1", "f_dc_2"),
        opacity_logits=rec["opacity"].astype(np.float64) if count else np.zeros(0),
    )


def load_cloud(path) -> GaussianCloud:
    return cloud_from_ply_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- PNG

def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, img, alpha=None) -> None:
    """8-bit PNG; RGBA when ``alpha`` is given.  Grayscale (H, W) arrays are saved as L."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        arr, mode = _to_u8(img), "L"
    elif alpha is None:
        arr, mode = _to_u8(img), "RGB"
    else:
        arr = np.concatenate([_to_u8(img), _to_u8(np.asarray(alpha))[..., None]], axis=2)
        mode = "RGBA"
    buf = io.BytesIO()
    Image.fromarray(arr, mode).save(buf, format="PNG")
    _atomic_write(Path(path), buf.getvalue())


def load_image(path):
    """``(image, alpha)`` in [0, 1]; ``alpha`` is None for images without one."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                return np.asarray(im, dtype=np.float64) / 255.0, None
            if mode in ("RGBA", "LA", "PA") or (mode == "P" and "transparency" in im.info):
                arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
                return arr[..., :3], arr[..., 3]
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0, None
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ParseError(f"{path}: cannot decode image ({e})") from None


# ---------------------------------------------------------------- datasets

MANIFEST = "manifest.json"
SCHEMA_VERSION = 1
SCENE_FILE = "scene.ply"


def _frame_straight(frame: Frame) -> np.ndarray:
    # stored PNGs carry straight (unpremultiplied) color
    a = frame.alpha[..., None]
    return np.where(a > 0, frame.image / np.where(a > 0, a, 1.0), 0.0)


def save_dataset(directory, ds: PseudoDataset) -> None:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    frames = []
    orbit_index = {}
    for i, f in enumerate(ds.frames):
        name = f.file_name or f"frame_{i:03d}.png"
        k = orbit_index.get(f.orbit_id, 0)
        orbit_index[f.orbit_id] = k + 1
        save_image(d / "frames" / name, _frame_straight(f), f.alpha)
        frames.append({"file": f"frames/{name}", "orbit_id": f.orbit_id, "orbit_index": k,
                       "camera": f.camera.to_dict()})
    heldout = []
    if ds.heldout:
        (d / "heldout").mkdir(exist_ok=True)
    for i, cam in enumerate(ds.heldout):
        entry = {"camera": cam.to_dict()}
        if ds.scene is not None:
            img, alpha = render_label(ds.scene, cam)
            name = f"heldout/view_{i:03d}.png"
            save_image(d / name, img + (1.0 - alpha)[..., None])
            entry["file"] = name
        heldout.append(entry)
    if ds.scene is not None:
        save_cloud(d / SCENE_FILE, ds.scene)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "consistent": ds.inconsistency.consistent,
        "inconsistency": {"geometry_jitter": ds.inconsistency.geometry_jitter,
                          "color_jitter": ds.inconsistency.color_jitter,
                          "seed": ds.inconsistency.seed},
        "orbits": [dataclasses.asdict(o) for o in ds.orbits],
        "scene": SCENE_FILE if ds.scene is not None else None,
        "scene_spec": ds.scene_spec.to_dict() if ds.scene_spec is not None else None,
        "scene_seed": ds.scene_seed,
        "heldout_seed": ds.heldout_seed,
        "frames": frames,
        "heldout": heldout,
    }
    _atomic_write(d / MANIFEST, (json.dumps(manifest, indent=1) + "\n").encode())


def _camera(d: dict) -> Camera:
    return Camera(d["azimuth"], d["elevation"], d["radius"], d["fov_y"], d["width"], d["height"])


def load_dataset(directory) -> PseudoDataset:
    """Load and verify a dataset directory against its manifest."""
    d = Path(directory)
    path = d / MANIFEST
    if not path.is_file():
        raise IntegrityError(f"{path}: manifest missing")
    try:
        man = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from None
    version = man.get("schema_version")
    if version != SCHEMA_VERSION:
        raise VersionError(f"{path}: unknown schema version {version!r} (expected {SCHEMA_VERSION})")
    try:
        orbits = [OrbitSpec(**o) for o in man["orbits"]]
        inc = InconsistencySpec(**man["inconsistency"])
        entries = man["frames"]
        stored = [_camera(e["camera"]) for e in entries]
    except (KeyError, TypeError) as e:
        raise ParseError(f"{path}: malformed manifest ({e})") from None

    expected = sum(o.frames_per_orbit for o in orbits)
    if len(entries) != expected:
        raise IntegrityError(f"manifest lists {len(entries)} frames, orbit specs imply {expected}")
    frames, pos = [], 0
    for oid, spec in enumerate(orbits):
        size = (stored[pos].width, stored[pos].height) if entries else (64, 64)
        for k, cam in enumerate(orbit_cameras(spec, *size)):
            e = entries[pos]
            if e["orbit_id"] != oid or stored[pos] != cam:
                raise IntegrityError(f"frame {e['file']}: camera does not match orbit {oid} frame {k}")
            fp = d / e["file"]
            if not fp.is_file():
                raise IntegrityError(f"frame {e['file']} is missing")
            rgb, alpha = load_image(fp)
            if alpha is None:
                alpha = np.ones(rgb.shape[:2])
            if rgb.shape[:2] != (cam.height, cam.width):
                raise IntegrityError(f"frame {e['file']}: size {rgb.shape[:2]} != camera {cam.height}x{cam.width}")
            frames.append(Frame(cam, rgb * alpha[..., None], alpha, oid, Path(e["file"]).name))
            pos += 1
    heldout = [_camera(h["camera"]) for h in man.get("heldout", [])]
    scene = None
    if man.get("scene"):
        sp = d / man["scene"]
        if not sp.is_file():
            raise IntegrityError(f"scene file {man['scene']} is missing")
        scene = load_cloud(sp)
    spec = SceneSpec.from_dict(man["scene_spec"]) if man.get("scene_spec") else None
    return PseudoDataset(frames, orbits, inc, heldout, scene, spec, man.get("scene_seed", 0),
                         man.get("heldout_seed", 0))


# ---------------------------------------------------------------- metrics log

def _jsonable(record):
    return record.to_dict() if hasattr(record, "to_dict") else record


def append_metrics(path, record) -> None:
    """Append one JSON object as a line."""
    line = json.dumps(_jsonable(record), separators=(",", ":"), allow_nan=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
        fh.flush()


def read_metrics(path) -> list[dict]:
    """All complete records; a trailing partial line is dropped with a warning."""
    text = Path(path).read_text(encoding="utf-8")
    if not text:
        return []
    lines = text.split("\n")
    tail = lines.pop()  # "" when the file ends with a newline
    out = []
    last = None
    for no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}:{no}: malformed record ({e.msg})") from None
        it = rec.get("iteration") if isinstance(rec, dict) else None
        if it is not None:
            if last is not None and it <= last:
                raise ParseError(f"{path}:{no}: iteration {it} does not follow {last}")
            last = it
        out.append(rec)
    if tail.strip():
        try:
            out.append(json.loads(tail))
        except json.JSONDecodeError:
            warnings.warn(f"{path}: discarding partial trailing record on line {len(lines) + 1}",
                          RuntimeWarning, stacklevel=2)
    return out


def truncate_metrics(path, last_iteration: int) -> None:
    """Keep only records with ``iteration <= last_iteration`` (used on resume)."""
    p = Path(path)
    if not p.exists():
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        keep = [r for r in read_metrics(p) if r.get("iteration", 0) <= last_iteration]
    _atomic_write(p, "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in keep).encode())


# ---------------------------------------------------------------- config

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def parse_config(text: str, known=None) -> dict:
    """``key = value`` lines with JSON values (bare words are taken as strings); ``#`` comments."""
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not _KEY.match(key):
            raise ConfigError(f"line {no}: expected 'key = value', got {raw!r}")
        if known is not None and key not in known:
            raise ConfigError(f"line {no}: {key}: unknown config key")
        if key in out:
            raise ConfigError(f"line {no}: {key}: duplicate key")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_\-]*", value):
                raise ConfigError(f"line {no}: {key}: cannot parse value {value!r}") from None
            out[key] = value
    return out


def load_config(path, known=None) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"), known)


def format_config(values: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in values.items())


def save_config(path, values: dict) -> None:
    _atomic_write(Path(path), format_config(values).encode())


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_RE = re.compile(r"^ckpt_(\d{6,})\.npz$")


def checkpoint_path(run_dir, iteration: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"ckpt_{iteration:06d}.npz"


def save_checkpoint(run_dir, state, config_dict: dict) -> Path:
    """Models, moments, accumulators, rng states and config for exact resume."""
    arrays = {}
    for k, (p, mom) in enumerate(zip(state.models, state.moments)):
        for name, a in p.items():
            arrays[f"m{k}/p/{name}"] = a
            arrays[f"m{k}/m/{name}"] = mom[name][0]
            arrays[f"m{k}/v/{name}"] = mom[name][1]
        arrays[f"m{k}/accum"] = state.grad_accum[k]
        arrays[f"m{k}/count"] = state.grad_count[k]
    meta = {
        "iteration": state.iteration,
        "steps": state.steps,
        "scene_extent": state.scene_extent,
        "mode": state.mode,
        "rng": state.rng.bit_generator.state,
        "model_rngs": [r.bit_generator.state for r in state.model_rngs],
        "config": config_dict,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = checkpoint_path(run_dir, state.iteration)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write(path, buf.getvalue())
    return path


def _generator(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def load_checkpoint(path):
    """``(TrainerState, config dict)`` from a checkpoint file."""
    from .train import TrainerState

    try:
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as e:
        raise ParseError(f"{path}: cannot read checkpoint ({e})") from None
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    n = len(meta["steps"])
    models, moments, accum, count = [], [], [], []
    for k in range(n):
        names = [key.split("/", 2)[2] for key in arrays if key.startswith(f"m{k}/p/")]
        models.append({name: arrays[f"m{k}/p/{name}"] for name in names})
        moments.append({name: (arrays[f"m{k}/m/{name}"], arrays[f"m{k}/v/{name}"]) for name in names})
        accum.append(arrays[f"m{k}/accum"])
        count.append(arrays[f"m{k}/count"])
    state = TrainerState(models, moments, list(meta["steps"]), meta["iteration"], accum, count,
                         _generator(meta["rng"]), [_generator(s) for s in meta["model_rngs"]],
                         meta["scene_extent"], meta["mode"])
    return state, meta["config"]


def list_checkpoints(run_dir) -> list[int]:
    d = Path(run_dir) / "checkpoints"
    if not d.is_dir():
        return []
    return sorted(int(m.group(1)) for f in d.iterdir() if (m := CHECKPOINT_RE.match(f.name)))


# ---------------------------------------------------------------- helpers

def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
