"""Procedural layered stereo scenes with exact ground-truth disparity.

Scenes are a textured background at zero disparity plus a few flat
textured layers (rectangles or ellipses) sorted far-to-near. The right view
is the left view with every layer translated left by its integer disparity,
painted with the same occlusion order, so ``left[y, x] == right[y, x - d]``
holds exactly wherever the point is visible in both views.

Every rendered value sits on the 8-bit grid ``k / 127.5 - 1`` so PNG
persistence is lossless.
"""

from __future__ import annotations

import hashlib
import json
import re
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .codec import StereoPair, stack

MANIFEST_VERSION = 1

FOREGROUND_COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.8, -0.8, -0.8),
    "green": (-0.8, 0.8, -0.8),
    "blue": (-0.8, -0.8, 0.8),
    "yellow": (0.8, 0.8, -0.8),
    "cyan": (-0.8, 0.8, 0.8),
    "magenta": (0.8, -0.8, 0.8),
    "orange": (0.8, 0.0, -0.8),
    "purple": (0.0, -0.8, 0.8),
}
BACKGROUND_COLORS: dict[str, tuple[float, float, float]] = {
    "gray": (0.0, 0.0, 0.0),
    "black": (-0.8, -0.8, -0.8),
    "white": (0.8, 0.8, 0.8),
}
SHAPES = ("rectangle", "ellipse")
# Position phrase -> normalized x-center of the focal layer.
POSITIONS: dict[str, float] = {
    "on the left in front of": 0.28,
    "in front of": 0.5,
    "on the right in front of": 0.72,
}
FOCAL_Y = 0.5
# Half extents (normalized) of the box a prompt scorer inspects. Focal
# layers are sized so this box always lies inside them.
FOCUS_HALF_W = 0.06
FOCUS_HALF_H = 0.10

_CAPTION_RE = re.compile(
    r"^a (?P<color>\w+) (?P<shape>\w+) (?P<position>.+?) a (?P<bg>\w+) background$"
)


@dataclass
class GenerationConfig:
    height: int = 32
    width: int = 64
    min_layers: int = 1
    max_layers: int = 3
    min_disparity: int = 2
    max_disparity: int = 8
    texture_amplitude: float = 0.1
    focal_jitter: float = 0.03

    def validate(self) -> None:
        if self.min_layers < 1 or self.max_layers > 4:
            raise ValueError("layer count must lie in [1, 4]")
        if self.min_layers > self.max_layers:
            raise ValueError(f"min_layers={self.min_layers} > max_layers={self.max_layers}")
        if not 0 < self.min_disparity <= self.max_disparity:
            raise ValueError("need 0 < min_disparity <= max_disparity")
        if self.max_disparity >= self.width:
            raise ValueError("max_disparity must be smaller than the image width")
        if self.max_layers > self.max_disparity - self.min_disparity + 1:
            raise ValueError("not enough distinct integer disparities for max_layers")
        if self.height < 4 or self.width < 4:
            raise ValueError("image too small")


@dataclass
class LayerSpec:
    shape: str
    color: tuple[float, float, float]
    position: tuple[float, float]
    size: tuple[float, float]
    disparity: int
    texture_seed: int
    color_word: str = ""


@dataclass
class SceneSpec:
    background_color: tuple[float, float, float]
    background_texture_seed: int
    layers: list[LayerSpec]
    resolution: tuple[int, int]
    baseline_tag: str
    background_word: str = ""
    position_word: str = "in front of"
    texture_amplitude: float = 0.1

    @property
    def focal(self) -> LayerSpec:
        return self.layers[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["layers"] = [
            LayerSpec(
                shape=l["shape"],
                color=tuple(l["color"]),
                position=tuple(l["position"]),
                size=tuple(l["size"]),
                disparity=int(l["disparity"]),
                texture_seed=int(l["texture_seed"]),
                color_word=l.get("color_word", ""),
            )
            for l in d["layers"]
        ]
        d["background_color"] = tuple(d["background_color"])
        d["resolution"] = tuple(d["resolution"])
        return cls(**d)

    def validate(self) -> None:
        if not 1 <= len(self.layers) <= 4:
            raise ValueError("scene needs 1-4 layers")
        disps = [l.disparity for l in self.layers]
        if any(b <= a for a, b in zip(disps, disps[1:])):
            raise ValueError(f"layer disparities must strictly increase far-to-near: {disps}")
        if disps[0] < 0:
            raise ValueError("layer disparities must be nonnegative")


@dataclass
class PromptSpec:
    color_word: str
    shape_word: str
    position_word: str
    background_word: str
    text: str = field(default="")

    def __post_init__(self):
        if not self.text:
            self.text = (
                f"a {self.color_word} {self.shape_word} {self.position_word} "
                f"a {self.background_word} background"
            )

    @property
    def target_color(self) -> tuple[float, float, float]:
        return FOREGROUND_COLORS[self.color_word]

    def validate(self) -> None:
        if self.color_word not in FOREGROUND_COLORS:
            raise ValueError(f"unknown color word {self.color_word!r}")
        if self.shape_word not in SHAPES:
            raise ValueError(f"unknown shape word {self.shape_word!r}")
        if self.position_word not in POSITIONS:
            raise ValueError(f"unknown position phrase {self.position_word!r}")
        if self.background_word not in BACKGROUND_COLORS:
            raise ValueError(f"unknown background word {self.background_word!r}")


def parse_caption(text: str) -> PromptSpec:
    m = _CAPTION_RE.match(text.strip())
    if m is None:
        raise ValueError(f"caption does not follow the template grammar: {text!r}")
    spec = PromptSpec(m["color"], m["shape"], m["position"], m["bg"])
    spec.validate()
    return spec


def vocabulary() -> set[str]:
    words = {"a", "background"}
    words.update(FOREGROUND_COLORS)
    words.update(BACKGROUND_COLORS)
    words.update(SHAPES)
    for phrase in POSITIONS:
        words.update(phrase.split())
    return words


def all_prompts() -> list[PromptSpec]:
    """Every caption the grammar can produce, in a fixed order."""
    return [
        PromptSpec(c, s, p, b)
        for c in FOREGROUND_COLORS
        for s in SHAPES
        for p in POSITIONS
        for b in BACKGROUND_COLORS
    ]


def split_prompts(n_train: int, n_heldout: int, seed: int) -> tuple[list[PromptSpec], list[PromptSpec]]:
    """Draw disjoint train and held-out prompt sets from the grammar.

    Held-out prompts come from the end of a seeded permutation and training
    prompts from its start, so the held-out set does not depend on
    ``n_train`` and smaller training sets are prefixes of larger ones.
    """
    pool = all_prompts()
    if n_train + n_heldout > len(pool):
        raise ValueError(f"grammar has only {len(pool)} prompts")
    order = np.random.default_rng(seed).permutation(len(pool))
    train = [pool[i] for i in order[:n_train]]
    heldout = [pool[i] for i in order[len(pool) - n_heldout :]] if n_heldout else []
    assert not {p.text for p in train} & {p.text for p in heldout}
    return train, heldout


def _baseline_tag(max_disp: int) -> str:
    if max_disp <= 3:
        return "small"
    if max_disp <= 6:
        return "medium"
    return "large"


def make_scene(rng: np.random.Generator, ranges: GenerationConfig | None = None) -> SceneSpec:
    ranges = ranges or GenerationConfig()
    ranges.validate()
    n_layers = int(rng.integers(ranges.min_layers, ranges.max_layers + 1))
    candidates = np.arange(ranges.min_disparity, ranges.max_disparity + 1)
    disps = np.sort(rng.choice(candidates, size=n_layers, replace=False))

    bg_word = str(rng.choice(list(BACKGROUND_COLORS)))
    fg_words = list(FOREGROUND_COLORS)
    position_word = str(rng.choice(list(POSITIONS)))
    layers = []
    for i, d in enumerate(disps):
        focal = i == n_layers - 1
        color_word = str(rng.choice(fg_words))
        shape = str(rng.choice(SHAPES))
        if focal:
            j = ranges.focal_jitter
            cx = POSITIONS[position_word] + rng.uniform(-j, j)
            cy = FOCAL_Y + rng.uniform(-j, j)
            w, h = rng.uniform(0.3, 0.45), rng.uniform(0.5, 0.8)
        else:
            cx, cy = rng.uniform(0.1, 0.9), rng.uniform(0.15, 0.85)
            w, h = rng.uniform(0.15, 0.45), rng.uniform(0.25, 0.7)
        layers.append(
            LayerSpec(
                shape=shape,
                color=FOREGROUND_COLORS[color_word],
                position=(float(cx), float(cy)),
                size=(float(w), float(h)),
                disparity=int(d),
                texture_seed=int(rng.integers(0, 2**31 - 1)),
                color_word=color_word,
            )
        )
    scene = SceneSpec(
        background_color=BACKGROUND_COLORS[bg_word],
        background_texture_seed=int(rng.integers(0, 2**31 - 1)),
        layers=layers,
        resolution=(ranges.height, ranges.width),
        baseline_tag=_baseline_tag(int(disps[-1])),
        background_word=bg_word,
        position_word=position_word,
        texture_amplitude=ranges.texture_amplitude,
    )
    scene.validate()
    return scene


def caption(scene: SceneSpec) -> PromptSpec:
    f = scene.focal
    return PromptSpec(f.color_word, f.shape, scene.position_word, scene.background_word)


def quantize(values: np.ndarray) -> np.ndarray:
    """Snap values in [-1, 1] onto the 8-bit grid used for PNG storage."""
    return decode_u8(encode_u8(values))


def encode_u8(values: np.ndarray) -> np.ndarray:
    return np.round((np.clip(values, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def decode_u8(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def _footprint(layer: LayerSpec, h: int, w: int, shift: int) -> np.ndarray:
    """Boolean mask of the layer in a view whose content is moved left by ``shift``.

    The footprint is clipped to the left frame before shifting, so content that
    would enter from beyond the left view's right edge is never invented.
    """
    ys = np.arange(h)[:, None] + 0.5
    xs_left = np.arange(w)[None, :] + shift
    cx, cy = layer.position[0] * w, layer.position[1] * h
    hw, hh = layer.size[0] * w / 2, layer.size[1] * h / 2
    if layer.shape == "rectangle":
        inside = (np.abs(xs_left + 0.5 - cx) <= hw) & (np.abs(ys - cy) <= hh)
    elif layer.shape == "ellipse":
        inside = ((xs_left + 0.5 - cx) / hw) ** 2 + ((ys - cy) / hh) ** 2 <= 1.0
    else:
        raise ValueError(f"unknown shape {layer.shape!r}")
    return inside & (xs_left < w)


def _texture(seed: int, h: int, w: int, amplitude: float) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-amplitude, amplitude, size=(h, w)).astype(np.float32)


def render_labels(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel topmost layer index (0 = background, i + 1 = layer i) for both views."""
    h, w = scene.resolution
    left = np.zeros((h, w), dtype=np.int64)
    right = np.zeros((h, w), dtype=np.int64)
    for i, layer in enumerate(scene.layers):
        left[_footprint(layer, h, w, 0)] = i + 1
        right[_footprint(layer, h, w, layer.disparity)] = i + 1
    return left, right


def render_arrays(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render ``(left, right, disparity)`` as float32 arrays; images are (H, W, 3)."""
    scene.validate()
    h, w = scene.resolution
    amp = scene.texture_amplitude
    lab_l, lab_r = render_labels(scene)

    colors = [np.asarray(scene.background_color, np.float32)]
    colors += [np.asarray(l.color, np.float32) for l in scene.layers]
    textures = [_texture(scene.background_texture_seed, h, w, amp)]
    textures += [_texture(l.texture_seed, h, w, amp) for l in scene.layers]
    disps = np.array([0] + [l.disparity for l in scene.layers])

    # Texture lives in left-view coordinates; the right view samples it at x + d.
    ys, xs = np.mgrid[0:h, 0:w]
    left = np.empty((h, w, 3), np.float32)
    right = np.empty((h, w, 3), np.float32)
    for k in range(len(colors)):
        m = lab_l == k
        left[m] = colors[k] + textures[k][m][:, None]
        m = lab_r == k
        src_x = xs[m] + disps[k]
        right[m] = colors[k] + textures[k][ys[m], src_x][:, None]
    disparity = disps[lab_l].astype(np.float32)
    return quantize(left), quantize(right), disparity


def visible_mask(scene: SceneSpec) -> np.ndarray:
    """Left-view pixels whose surface point is also visible in the right view."""
    h, w = scene.resolution
    lab_l, lab_r = render_labels(scene)
    disps = np.array([0] + [l.disparity for l in scene.layers])
    d = disps[lab_l]
    xs = np.arange(w)[None, :] - d
    ys = np.broadcast_to(np.arange(h)[:, None], (h, w))
    inside = xs >= 0
    out = np.zeros((h, w), bool)
    out[inside] = lab_r[ys[inside], xs[inside]] == lab_l[inside]
    return out


def to_chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))


def to_hwc(image: torch.Tensor) -> np.ndarray:
    return image.detach().cpu().numpy().transpose(1, 2, 0)


def render_stereo(scene: SceneSpec) -> tuple[StereoPair, torch.Tensor]:
    left, right, disp = render_arrays(scene)
    return StereoPair(to_chw(left), to_chw(right)), torch.from_numpy(disp)


def focus_box(position_word: str, height: int, width: int) -> tuple[slice, slice]:
    """Pixel window inspected for the prompted foreground color."""
    cx = POSITIONS[position_word] * width
    cy = FOCAL_Y * height
    hw, hh = FOCUS_HALF_W * width, FOCUS_HALF_H * height
    x0, x1 = int(np.floor(cx - hw)), int(np.ceil(cx + hw))
    y0, y1 = int(np.floor(cy - hh)), int(np.ceil(cy + hh))
    return slice(max(y0, 0), min(y1, height)), slice(max(x0, 0), min(x1, width))


# ----------------------------------------------------------------------------
# persistence


def save_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(encode_u8(image), mode="RGB").save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return decode_u8(np.asarray(im.convert("RGB")))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class SceneRecord:
    scene_id: str
    scene: SceneSpec
    prompt: PromptSpec
    pair: StereoPair
    disparity: torch.Tensor

    @property
    def stacked(self) -> torch.Tensor:
        return stack(self.pair)


def generate_scenes(n: int, seed: int, ranges: GenerationConfig | None = None) -> list[SceneSpec]:
    """``n`` scenes, each from its own child seed so scene ``i`` never depends on ``n``."""
    ranges = ranges or GenerationConfig()
    children = np.random.SeedSequence(seed).spawn(n)
    return [make_scene(np.random.default_rng(c), ranges) for c in children]


def _write_scene(scene_dir: Path, scene: SceneSpec) -> dict[str, str]:
    scene_dir.mkdir(parents=True)
    left, right, disp = render_arrays(scene)
    save_png(scene_dir / "left.png", left)
    save_png(scene_dir / "right.png", right)
    save_png(scene_dir / "stacked.png", np.concatenate([left, right], axis=0))
    disp.astype("<f4").tofile(scene_dir / "disparity.f32")
    meta = {"height": disp.shape[0], "width": disp.shape[1], "dtype": "float32", "byte_order": "little"}
    (scene_dir / "disparity.meta.json").write_text(json.dumps(meta, indent=2))
    return {
        name: _sha256(scene_dir / name)
        for name in ("left.png", "right.png", "stacked.png", "disparity.f32")
    }


def build_dataset(
    n: int, out_dir: str | Path, seed: int, ranges: GenerationConfig | None = None
) -> dict:
    """Render ``n`` scenes to ``out_dir`` and return the manifest.

    The dataset is assembled in a temporary sibling directory and moved into
    place only once complete. An existing ``out_dir`` is replaced only if it is
    empty or is itself a dataset (contains ``manifest.json``).
    """
    if n < 1:
        raise ValueError("n must be positive")
    ranges = ranges or GenerationConfig()
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not (out_dir / "manifest.json").exists():
        raise FileExistsError(f"{out_dir} exists and is not a dataset directory")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}-", dir=out_dir.parent))
    try:
        scenes_meta = []
        for i, scene in enumerate(generate_scenes(n, seed, ranges)):
            sid = f"{i:05d}"
            rel = Path("scenes") / sid
            checksums = _write_scene(tmp / rel, scene)
            scenes_meta.append(
                {
                    "id": sid,
                    "caption": caption(scene).text,
                    "scene": scene.to_dict(),
                    "files": {
                        "left": str(rel / "left.png"),
                        "right": str(rel / "right.png"),
                        "stacked": str(rel / "stacked.png"),
                        "disparity": str(rel / "disparity.f32"),
                        "disparity_meta": str(rel / "disparity.meta.json"),
                    },
                    "sha256": checksums,
                }
            )
        manifest = {
            "version": MANIFEST_VERSION,
            "seed": seed,
            "scene_count": n,
            "generation": asdict(ranges),
            "scenes": scenes_meta,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def verify_manifest(root: str | Path) -> None:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    for entry in manifest["scenes"]:
        for key, digest in entry["sha256"].items():
            path = root / "scenes" / entry["id"] / key
            if not path.exists():
                raise FileNotFoundError(path)
            if _sha256(path) != digest:
                raise ValueError(f"checksum mismatch for {path}")


def load_dataset(root: str | Path, verify: bool = False) -> list[SceneRecord]:
    root = Path(root)
    if verify:
        verify_manifest(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    records = []
    for entry in manifest["scenes"]:
        files = entry["files"]
        meta = json.loads((root / files["disparity_meta"]).read_text())
        disp = np.fromfile(root / files["disparity"], dtype="<f4").reshape(meta["height"], meta["width"])
        left = load_png(root / files["left"])
        right = load_png(root / files["right"])
        records.append(
            SceneRecord(
                scene_id=entry["id"],
                scene=SceneSpec.from_dict(entry["scene"]),
                prompt=parse_caption(entry["caption"]),
                pair=StereoPair(to_chw(left), to_chw(right)),
                disparity=torch.from_numpy(disp.astype(np.float32)),
            )
        )
    return records


def records_from_scenes(scenes: list[SceneSpec]) -> list[SceneRecord]:
    """In-memory equivalent of ``load_dataset`` for freshly generated scenes."""
    out = []
    for i, scene in enumerate(scenes):
        pair, disp = render_stereo(scene)
        out.append(SceneRecord(f"{i:05d}", scene, caption(scene), pair, disp))
    return out
