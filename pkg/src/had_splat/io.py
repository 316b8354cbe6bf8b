"""File formats: PPM/PNG images, PFM float maps, JSON sidecars, checkpoints, CSV."""
import csv
import datetime
import json
import os

import numpy as np

from .errors import ContractError, ParseError
from .scene import Camera, GaussianSet, Role, SceneSpec, ViewRecord, ViewSet

_WS = b" \t\r\n"


# -- PPM / PNG ---------------------------------------------------------------


def _header_token(data, pos, field):
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        if data[pos] in _WS:
            pos += 1
        elif data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WS and data[pos] != ord("#"):
        pos += 1
    if start == pos:
        raise ParseError(f"truncated header: missing {field}", start)
    return data[start:pos], pos


def decode_ppm(data):
    """Decode a binary P6 buffer (maxval < 256) into float64 (H, W, 3) in [0, 1]."""
    magic, pos = _header_token(data, 0, "magic number")
    if magic != b"P6":
        raise ParseError(f"bad magic {magic!r}, expected P6", 0)
    values = []
    for field in ("width", "height", "maxval"):
        tok, new_pos = _header_token(data, pos, field)
        if not tok.isdigit() or int(tok) <= 0:
            raise ParseError(f"invalid {field} {tok!r}", new_pos - len(tok))
        values.append(int(tok))
        pos = new_pos
    w, h, maxval = values
    if maxval > 255:
        raise ParseError(f"16-bit PPM (maxval {maxval}) is not supported", pos - len(str(maxval)))
    if pos >= len(data) or data[pos] not in _WS:
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    need = w * h * 3
    if len(data) - pos < need:
        raise ParseError(f"truncated pixel data: expected {need} bytes, found {len(data) - pos}", len(data))
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return px.astype(np.float64) / maxval


def encode_ppm(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    px = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def _image_format(path, fmt=None):
    if fmt:
        return fmt.lower()
    ext = os.path.splitext(path)[1].lower()
    return {".png": "png", ".pfm": "pfm"}.get(ext, "ppm")


def write_image(path, img, fmt=None):
    fmt = _image_format(path, fmt)
    if fmt == "png":
        from PIL import Image

        px = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(px, "RGB").save(path)
    elif fmt == "pfm":
        write_pfm(path, img)
    else:
        with open(path, "wb") as fh:
            fh.write(encode_ppm(img))


def read_image(path, fmt=None):
    fmt = _image_format(path, fmt)
    if fmt == "png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if fmt == "pfm":
        return read_pfm(path)
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


# -- PFM ---------------------------------------------------------------------


def encode_pfm(arr):
    """Single-channel ('Pf') or RGB ('PF') little-endian float32, bottom row first."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise ContractError(f"PFM needs (H, W) or (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    body = np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes()
    return magic + f"\n{w} {h}\n-1.0\n".encode() + body


def decode_pfm(data):
    magic, pos = _header_token(data, 0, "magic number")
    if magic not in (b"PF", b"Pf"):
        raise ParseError(f"bad magic {magic!r}, expected PF or Pf", 0)
    channels = 3 if magic == b"PF" else 1
    dims = []
    for field in ("width", "height"):
        tok, pos = _header_token(data, pos, field)
        if not tok.isdigit() or int(tok) <= 0:
            raise ParseError(f"invalid {field} {tok!r}", pos - len(tok))
        dims.append(int(tok))
    tok, pos = _header_token(data, pos, "scale")
    try:
        scale = float(tok)
    except ValueError:
        raise ParseError(f"invalid scale {tok!r}", pos - len(tok)) from None
    if pos >= len(data) or data[pos] not in _WS:
        raise ParseError("missing whitespace after scale", pos)
    pos += 1
    w, h = dims
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * channels * 4
    if len(data) - pos < need:
        raise ParseError(f"truncated PFM data: expected {need} bytes, found {len(data) - pos}", len(data))
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape)[::-1].astype(np.float32)


def write_pfm(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode_pfm(arr))


def read_pfm(path):
    with open(path, "rb") as fh:
        return decode_pfm(fh.read())


# -- JSON documents ----------------------------------------------------------


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_scene(out_dir, gset, views, spec=None, image_format="ppm"):
    """Persist a ground-truth set and a ViewSet: images, camera sidecars, checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    ext = "png" if image_format == "png" else "ppm"
    entries = []
    for i, v in enumerate(views.views):
        name = f"view_{i:04d}"
        write_image(os.path.join(out_dir, f"{name}.{ext}"), v.image, ext)
        cam = dict(v.camera.to_dict(), role=v.role.value)
        write_json(os.path.join(out_dir, f"{name}.json"), cam)
        entries.append(name)
    # float copies keep reloaded views bit-exact; the 8-bit images are for viewing
    np.savez(os.path.join(out_dir, "images.npz"), **{n: v.image for n, v in zip(entries, views.views)})
    meta = {"views": entries, "background": [float(c) for c in views.background],
            "bounds": np.asarray(views.bounds).tolist(), "image_format": ext}
    if spec is not None:
        meta["spec"] = spec.to_dict()
    write_json(os.path.join(out_dir, "scene.json"), meta)
    if gset is not None:
        save_gaussians(os.path.join(out_dir, "gt"), gset)


def load_scene(scene_dir):
    """Returns (ground-truth GaussianSet or None, ViewSet, SceneSpec or None)."""
    meta = read_json(os.path.join(scene_dir, "scene.json"))
    npz_path = os.path.join(scene_dir, "images.npz")
    floats = np.load(npz_path) if os.path.exists(npz_path) else None
    records = []
    for name in meta["views"]:
        cam_d = read_json(os.path.join(scene_dir, f"{name}.json"))
        role = Role(cam_d.pop("role"))
        if floats is not None and name in floats:
            img = floats[name]
        else:
            img = read_image(os.path.join(scene_dir, f"{name}.{meta.get('image_format', 'ppm')}"))
        records.append(ViewRecord(Camera.from_dict(cam_d), img, role))
    views = ViewSet(records, np.array(meta["background"]), np.array(meta["bounds"]))
    gt = load_gaussians(os.path.join(scene_dir, "gt")) if os.path.exists(os.path.join(scene_dir, "gt.json")) else None
    spec = SceneSpec.from_dict(meta["spec"]) if "spec" in meta else None
    return gt, views, spec


def save_gaussians(stem, gset):
    """Checkpoint as ``stem.json`` (metadata) plus ``stem.npz`` (parameter arrays)."""
    np.savez(stem + ".npz", **gset.params())
    write_json(stem + ".json", {"num_gaussians": len(gset), "sh_degree": gset.sh_degree,
                                "background": [float(c) for c in gset.background],
                                "arrays": os.path.basename(stem) + ".npz"})


def load_gaussians(stem):
    meta = read_json(stem + ".json")
    arr = np.load(os.path.join(os.path.dirname(stem) or ".", meta["arrays"]))
    return GaussianSet(arr["means"], arr["log_scales"], arr["quats"], arr["opacity_logits"], arr["sh"],
                       np.array(meta["background"]))


def save_triplets(out_dir, triplets, image_format="ppm"):
    os.makedirs(out_dir, exist_ok=True)
    ext = "png" if image_format == "png" else "ppm"
    for t in triplets:
        d = os.path.join(out_dir, f"view_{t.view_index:04d}")
        os.makedirs(d, exist_ok=True)
        write_image(os.path.join(d, f"gt.{ext}"), t.gt_image, ext)
        write_image(os.path.join(d, f"aug.{ext}"), t.augmented, ext)
        write_image(os.path.join(d, f"splat.{ext}"), t.splat_render, ext)
        write_pfm(os.path.join(d, "score.pfm"), t.gt_score)
        write_json(os.path.join(d, "camera.json"), dict(t.camera.to_dict(), ref_index=t.ref_index))


def write_metrics_csv(path, rows, columns, timestamp=True):
    """CSV with an optional leading '#' timestamp line (ignored when comparing runs)."""
    with open(path, "w", newline="") as fh:
        if timestamp:
            fh.write(f"# generated {datetime.datetime.now(datetime.timezone.utc).isoformat()}\n")
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def csv_body(path):
    """File contents without '#' comment lines."""
    with open(path) as fh:
        return "".join(ln for ln in fh if not ln.startswith("#"))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v


def dump_round(out_dir, round_idx, entries):
    """Fused images, score maps and masks of one augmentation round under round_%03d/."""
    d = os.path.join(out_dir, f"round_{round_idx:03d}")
    os.makedirs(d, exist_ok=True)
    for slot, e in enumerate(entries):
        write_image(os.path.join(d, f"slot_{slot:02d}_fused.ppm"), e.image)
        write_pfm(os.path.join(d, f"slot_{slot:02d}_score.pfm"), e.score)
        write_pfm(os.path.join(d, f"slot_{slot:02d}_mask.pfm"), e.mask.astype(np.float32))
        write_json(os.path.join(d, f"slot_{slot:02d}_camera.json"), e.camera.to_dict())
    return d
