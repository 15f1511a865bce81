"""Procedural scene generator: images, regions, labels, captions, LSJ, dataset io.

Scenes hold one or two colored shapes on a noisy dark canvas.  Layout
sampling (attributes, relation, placement) is shared between image rendering
and text-corpus generation so both draw from the same distribution.
Detection-style and caption-style corpora use the identical pipeline and
differ only in which target token sequence the trainer selects.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import grammar
from .autodiff import Tensor
from .seeds import derive, rng_for


class GenerationError(RuntimeError):
    """Object placement failed after bounded retries."""


class ParseError(ValueError):
    """A dataset file is malformed; message names the failing record."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    canvas: int = 64
    max_objects: int = 2
    p_two_objects: float = 0.6
    size_small: tuple = (10.0, 13.0)
    size_large: tuple = (15.0, 20.0)
    background: tuple = (0.12, 0.12, 0.12)
    noise_std: float = 0.01
    margin: int = 1
    axis_gap: float = 3.0   # dominance margin so the direction word is unambiguous
    max_retries: int = 80


@dataclass
class Scene:
    image: Tensor                 # (H, W, 3) in [0, 1]
    objects: list                 # list[grammar.ObjectSpec]
    seed: int


@dataclass
class RegionSample:
    box: tuple        # (x0, y0, x1, y1) pixels, half-open
    point: tuple      # (x, y) pixel inside the mask
    mask: Tensor      # (H, W) binary
    class_label: np.ndarray   # token ids, ends with EOS
    caption: np.ndarray       # token ids, ends with EOS


@dataclass
class TrainSample:
    """One region paired with its scene image; the unit the trainer consumes."""
    scene_seed: int
    image: Tensor
    region: RegionSample
    uid: str | None = None    # cache key; None disables frozen-feature caching


# ---------------------------------------------------------------------------
# layout sampling (no pixels)


def _half_extents(kind: str, size: float):
    if kind == "triangle":
        return size / 2.0, 0.433 * size
    return size / 2.0, size / 2.0


def _sample_object(rng, cfg: SceneConfig):
    kind = grammar.sample_shape(rng)
    color = grammar.sample_color(rng)
    size_class = "small" if rng.random() < 0.5 else "large"
    lo, hi = cfg.size_small if size_class == "small" else cfg.size_large
    size = float(rng.uniform(lo, hi))
    return kind, color, size_class, size


def _place_first(rng, cfg, hx, hy):
    cx = float(rng.uniform(cfg.margin + hx, cfg.canvas - cfg.margin - hx))
    cy = float(rng.uniform(cfg.margin + hy, cfg.canvas - cfg.margin - hy))
    return cx, cy


def sample_layout(rng: np.random.Generator, cfg: SceneConfig) -> list:
    """Sample object attributes, relation, and placement for one scene."""
    two = cfg.max_objects >= 2 and rng.random() < cfg.p_two_objects
    kind1, color1, size_class1, size1 = _sample_object(rng, cfg)
    hx1, hy1 = _half_extents(kind1, size1)
    cx1, cy1 = _place_first(rng, cfg, hx1, hy1)
    if not two:
        return [grammar.ObjectSpec(kind1, color1, size_class1, (cx1, cy1), size1)]

    direction = grammar.sample_direction(rng)  # object 1 is <direction> of object 2
    kind2, color2, size_class2, size2 = _sample_object(rng, cfg)
    hx2, hy2 = _half_extents(kind2, size2)
    gap = max(hx1 + hx2, hy1 + hy2) + 2.0
    c, m = cfg.canvas, cfg.margin
    horizontal = direction in ("left", "right")
    # construct the displacement first, then place both objects inside it
    ha1, ho1 = (hx1, hy1) if horizontal else (hy1, hx1)
    ha2, ho2 = (hx2, hy2) if horizontal else (hy2, hx2)
    ham = max(ha1, ha2)   # shared bound so the direction swap stays in-canvas
    for _ in range(cfg.max_retries):
        d_off = float(rng.uniform(-6.0, 6.0))
        lo = max(gap, abs(d_off) + cfg.axis_gap)
        hi = c - 2 * m - 2 * ham
        if lo > hi:
            continue
        d_main = float(rng.uniform(lo, hi))
        main1 = float(rng.uniform(m + ham, c - m - ham - d_main))
        main2 = main1 + d_main
        if direction in ("right", "south"):
            main1, main2 = main2, main1
        off_lo = max(m + ho1, m + ho2 + d_off)
        off_hi = min(c - m - ho1, c - m - ho2 + d_off)
        if off_lo >= off_hi:
            continue
        off1 = float(rng.uniform(off_lo, off_hi))
        off2 = off1 - d_off
        if horizontal:
            (cx1, cy1), (cx2, cy2) = (main1, off1), (main2, off2)
        else:
            (cx1, cy1), (cx2, cy2) = (off1, main1), (off2, main2)
        verb1 = grammar.sample_verb(rng, kind1)
        verb2 = grammar.sample_verb(rng, kind2)
        return [
            grammar.ObjectSpec(kind1, color1, size_class1, (cx1, cy1), size1,
                               verb=verb1, direction=direction, other=1),
            grammar.ObjectSpec(kind2, color2, size_class2, (cx2, cy2), size2,
                               verb=verb2, direction=grammar.OPPOSITE[direction],
                               other=0),
        ]
    raise GenerationError(
        f"could not place second object after {cfg.max_retries} retries")


# ---------------------------------------------------------------------------
# rasterization


def rasterize(obj: grammar.ObjectSpec, canvas: int) -> np.ndarray:
    """Binary mask of the object over the canvas, pixel-center sampling."""
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    px = xs + 0.5
    py = ys + 0.5
    cx, cy = obj.center
    s = obj.size
    if obj.kind == "square":
        h = s / 2.0
        m = (np.abs(px - cx) <= h) & (np.abs(py - cy) <= h)
    elif obj.kind == "circle":
        r = s / 2.0
        m = (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    elif obj.kind == "triangle":
        # upward isosceles triangle: apex on top, base width s, height 0.866 s
        h = 0.866 * s
        top = cy - h / 2.0
        bot = cy + h / 2.0
        inside_y = (py >= top) & (py <= bot)
        frac = np.clip((py - top) / h, 0.0, 1.0)
        m = inside_y & (np.abs(px - cx) <= frac * (s / 2.0))
    else:
        raise ConfigError(f"unknown shape kind {obj.kind!r}")
    return m.astype(np.float64)


def analytic_area(obj: grammar.ObjectSpec) -> float:
    s = obj.size
    if obj.kind == "square":
        return s * s
    if obj.kind == "circle":
        return np.pi * (s / 2.0) ** 2
    return 0.5 * s * (0.866 * s)


def perimeter(obj: grammar.ObjectSpec) -> float:
    s = obj.size
    if obj.kind == "square":
        return 4 * s
    if obj.kind == "circle":
        return np.pi * s
    return s + 2 * np.hypot(s / 2.0, 0.866 * s)


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Deterministic scene for (seed, config); objects never overlap."""
    if cfg.canvas < 16 or cfg.max_objects < 1:
        raise ConfigError(f"invalid scene config: canvas={cfg.canvas}, "
                          f"max_objects={cfg.max_objects}")
    rng = rng_for(seed, "scene")
    objects = sample_layout(rng, cfg)
    img = np.empty((cfg.canvas, cfg.canvas, 3))
    img[:] = cfg.background
    img += rng.normal(0.0, cfg.noise_std, size=img.shape)
    for obj in objects:
        m = rasterize(obj, cfg.canvas).astype(bool)
        if m.sum() < 9:
            raise GenerationError(f"degenerate object with area {int(m.sum())}")
        img[m] = grammar.COLOR_RGB[obj.color]
    np.clip(img, 0.0, 1.0, out=img)
    return Scene(image=Tensor(img), objects=objects, seed=seed)


# ---------------------------------------------------------------------------
# regions and captions


def caption_grammar(obj: grammar.ObjectSpec, scene: Scene) -> list:
    """Caption word sequence for one object of a scene."""
    return grammar.caption_words(obj, scene.objects)


def regions_of(scene: Scene, vocab=None) -> list:
    """One RegionSample per object; masks equal the object rasterization."""
    from .lm import default_vocabulary
    vocab = vocab or default_vocabulary()
    canvas = scene.image.shape[0]
    out = []
    for i, obj in enumerate(scene.objects):
        mask = rasterize(obj, canvas)
        ys, xs = np.nonzero(mask)
        x0, x1 = int(xs.min()), int(xs.max()) + 1
        y0, y1 = int(ys.min()), int(ys.max()) + 1
        rng = rng_for(scene.seed, "point", i)
        k = int(rng.integers(0, len(xs)))
        point = (int(xs[k]), int(ys[k]))
        label_ids = vocab.encode(grammar.label_words(obj), add_eos=True)
        caption_ids = vocab.encode(caption_grammar(obj, scene), add_eos=True)
        out.append(RegionSample(box=(x0, y0, x1, y1), point=point,
                                mask=Tensor(mask), class_label=label_ids,
                                caption=caption_ids))
    return out


def build_corpus(seed: int, n_scenes: int, cfg: SceneConfig = SceneConfig(),
                 tag: str = "corpus", vocab=None) -> list:
    """List of TrainSamples (one per region) from n_scenes seeded scenes."""
    samples = []
    for i in range(n_scenes):
        scene_seed = derive(seed, tag, i)
        scene = generate_scene(scene_seed, cfg)
        for j, region in enumerate(regions_of(scene, vocab)):
            samples.append(TrainSample(scene_seed=scene_seed, image=scene.image,
                                       region=region, uid=f"{tag}:{i}:{j}"))
    return samples


def lm_text_corpus(seed: int, n_sentences: int, cfg: SceneConfig = SceneConfig(),
                   narration_frac: float = 0.85, caption_frac: float = 0.09):
    """Sentence corpus for LM pretraining: narrations + captions + labels.

    Drawn from the same layout distribution as the image corpora, so the
    frozen LM later assigns realistic mass to both caption and label targets.
    """
    rng = rng_for(seed, "lmtext")
    sentences = []
    for _ in range(n_sentences):
        objects = sample_layout(rng, cfg)
        idx = int(rng.integers(0, len(objects)))
        obj = objects[idx]
        u = rng.random()
        if u < narration_frac:
            sentences.append(grammar.narration_words(obj, objects))
        elif u < narration_frac + caption_frac:
            sentences.append(grammar.caption_words(obj, objects))
        else:
            sentences.append(grammar.label_words(obj))
    return sentences


# ---------------------------------------------------------------------------
# large-scale jittering


def _resize_bilinear(img: np.ndarray, h2: int, w2: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h2, w2) == (h, w):
        return img.copy()
    sy = (np.arange(h2) + 0.5) * (h / h2) - 0.5
    sx = (np.arange(w2) + 0.5) * (w / w2) - 0.5
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(sy - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(sx - x0, 0.0, 1.0)[None, :, None]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def _resize_nearest(mask: np.ndarray, h2: int, w2: int) -> np.ndarray:
    h, w = mask.shape
    if (h2, w2) == (h, w):
        return mask.copy()
    sy = np.clip(np.rint((np.arange(h2) + 0.5) * (h / h2) - 0.5).astype(int), 0, h - 1)
    sx = np.clip(np.rint((np.arange(w2) + 0.5) * (w / w2) - 0.5).astype(int), 0, w - 1)
    return mask[np.ix_(sy, sx)]


def lsj_augment(sample: TrainSample, scale_min: float, scale_max: float,
                seed: int):
    """Resize by a random scale, then crop/pad back to the original canvas.

    Box, point, and mask are transformed consistently; returns None when the
    region's mask vanishes entirely.  Callers drop regions whose visible area
    falls below 9 px.
    """
    if not (0 < scale_min <= scale_max):
        raise ConfigError(f"invalid LSJ scale range ({scale_min}, {scale_max})")
    h, w = sample.image.shape[:2]
    rng = rng_for(seed, "lsj")
    s = float(rng.uniform(scale_min, scale_max))
    h2 = max(1, int(round(h * s)))
    w2 = max(1, int(round(w * s)))
    img_r = _resize_bilinear(sample.image.data, h2, w2)
    mask_r = _resize_nearest(sample.region.mask.data, h2, w2)

    if h2 >= h:
        oy = int(rng.integers(0, h2 - h + 1))
        ox = int(rng.integers(0, w2 - w + 1))
        img2 = img_r[oy:oy + h, ox:ox + w]
        mask2 = mask_r[oy:oy + h, ox:ox + w]
        shift_x, shift_y = -ox, -oy
    else:
        oy = int(rng.integers(0, h - h2 + 1))
        ox = int(rng.integers(0, w - w2 + 1))
        img2 = np.zeros((h, w, 3))
        mask2 = np.zeros((h, w))
        img2[oy:oy + h2, ox:ox + w2] = img_r
        mask2[oy:oy + h2, ox:ox + w2] = mask_r
        shift_x, shift_y = ox, oy

    ys, xs = np.nonzero(mask2)
    if len(xs) == 0:
        return None
    px, py = sample.region.point
    px2 = int(round((px + 0.5) * (w2 / w) - 0.5)) + shift_x
    py2 = int(round((py + 0.5) * (h2 / h) - 0.5)) + shift_y
    if not (0 <= px2 < w and 0 <= py2 < h and mask2[py2, px2] > 0):
        k = int(np.argmin((xs - px2) ** 2 + (ys - py2) ** 2))
        px2, py2 = int(xs[k]), int(ys[k])
    box2 = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    region = replace(sample.region, box=box2, point=(px2, py2),
                     mask=Tensor(mask2))
    return TrainSample(scene_seed=sample.scene_seed,
                       image=Tensor(np.clip(img2, 0.0, 1.0)),
                       region=region, uid=None)


# ---------------------------------------------------------------------------
# dataset export / import

_HEADER = "regioncap-dataset v1"


def _ids_str(ids) -> str:
    return ",".join(str(int(i)) for i in ids)


def export_dataset(samples, path, vocab=None) -> None:
    """Write samples as a text manifest plus a raw little-endian float blob."""
    from .lm import default_vocabulary
    vocab = vocab or default_vocabulary()
    os.makedirs(path, exist_ok=True)
    blob_path = os.path.join(path, "blob.bin")
    records = []
    image_offsets = {}
    with open(blob_path, "wb") as blob:
        off = 0

        def write(arr):
            nonlocal off
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            blob.write(raw)
            start = off
            off += len(raw)
            return start, len(raw)

        for i, s in enumerate(samples):
            if s.scene_seed not in image_offsets:
                image_offsets[s.scene_seed] = write(s.image.data)
            img_off, img_len = image_offsets[s.scene_seed]
            mask_off, mask_len = write(s.region.mask.data)
            r = s.region
            records.append(" ".join([
                str(i), str(s.scene_seed),
                *(str(v) for v in r.box), str(r.point[0]), str(r.point[1]),
                _ids_str(r.class_label), _ids_str(r.caption),
                str(img_off), str(img_len), str(mask_off), str(mask_len),
            ]))
    canvas = samples[0].image.shape[0] if samples else 0
    with open(os.path.join(path, "manifest.txt"), "w") as f:
        f.write(f"{_HEADER} canvas={canvas} count={len(samples)}\n")
        f.write("\n".join(records))
        if records:
            f.write("\n")
    vocab.save(os.path.join(path, "vocab.txt"))


def import_dataset(path):
    """Inverse of export_dataset; raises ParseError naming the bad record."""
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest):
        raise ParseError(f"missing manifest: {manifest}")
    with open(manifest) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith(_HEADER):
        raise ParseError("manifest header missing or unrecognized")
    head = dict(part.split("=") for part in lines[0].split()[2:])
    canvas = int(head["canvas"])
    count = int(head["count"])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ParseError(f"manifest count {count} != {len(body)} records")
    blob = np.fromfile(os.path.join(path, "blob.bin"), dtype="<f8")
    nbytes = blob.size * 8
    samples = []
    for ln in body:
        idx = "?"
        try:
            parts = ln.split()
            idx = parts[0]
            (scene_seed, x0, y0, x1, y1, px, py) = (int(v) for v in parts[1:8])
            label = np.array([int(v) for v in parts[8].split(",")], dtype=np.int64)
            caption = np.array([int(v) for v in parts[9].split(",")], dtype=np.int64)
            img_off, img_len, mask_off, mask_len = (int(v) for v in parts[10:14])
            if img_off + img_len > nbytes or mask_off + mask_len > nbytes:
                raise ValueError("blob offsets out of range")
            img = blob[img_off // 8:(img_off + img_len) // 8].reshape(canvas, canvas, 3)
            mask = blob[mask_off // 8:(mask_off + mask_len) // 8].reshape(canvas, canvas)
        except ParseError:
            raise
        except Exception as exc:
            raise ParseError(f"record {idx}: {exc}") from exc
        region = RegionSample(box=(x0, y0, x1, y1), point=(px, py),
                              mask=Tensor(mask), class_label=label, caption=caption)
        samples.append(TrainSample(scene_seed=scene_seed, image=Tensor(img.copy()),
                                   region=region, uid=f"import:{idx}"))
    return samples
