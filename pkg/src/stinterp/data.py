"""Synthetic aligned histology/expression volumes and dataset I/O.

A volume is a stack of registered slice pairs: an expression patch with N
gene channels and a 3-channel H&E-style rendering. Slice k is produced from
slice k-1 by a smooth random displacement field plus per-gene intensity
drift, so adjacent slices are related by a learnable deformation. The H&E
image is a deterministic rendering of a cell-density channel derived from
the gene maps, so its gradients trace the same tissue boundaries.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .ctf import read_ctf, write_ctf

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class STPatch:
    genes: np.ndarray  # [N,H,W] in [0,1]
    slice_index: int


@dataclass
class HEPatch:
    rgb: np.ndarray  # [3,H,W] in [0,1]
    slice_index: int


@dataclass
class SliceTuple:
    anchors: tuple  # (STPatch, STPatch)
    he_anchors: tuple  # (HEPatch, HEPatch)
    targets: list  # s STPatch strictly between the anchors


@dataclass
class GeneratorConfig:
    genes: int = 8
    size: int = 32
    slices: int = 19
    volumes: int = 64
    deform: float = 1.5  # RMS displacement between adjacent slices, pixels
    drift: float = 0.05  # stdev of per-gene multiplicative intensity drift
    sparsity: float = 0.5  # per-gene fraction of low-intensity pixels zeroed
    blobs: int = 4  # gaussian bumps per latent program
    programs: int = 3  # latent programs mixed into the gene maps
    # train/val/test volume ratio, normalized before use
    split_ratio: tuple = (852, 100, 264)
    # gene identities are dataset-wide: every volume mixes its latent
    # programs with the same per-gene loadings, drawn from this seed
    # (None: derive loadings from the volume seed, for standalone volumes)
    gene_seed: int | None = None


# ----------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------


def derive_seed(master_seed, index):
    """Stable per-volume seed from a master seed via a counter hash."""
    digest = hashlib.sha256(f"{master_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _bilinear_resize(arr, out_h, out_w):
    """Resize [..., h, w] with bilinear interpolation (edge clamped)."""
    h, w = arr.shape[-2:]
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    ty = (ys - y0).reshape(-1, 1)
    tx = (xs - x0).reshape(1, -1)
    a = arr[..., y0[:, None], x0[None, :]]
    b = arr[..., y0[:, None], x1[None, :]]
    c = arr[..., y1[:, None], x0[None, :]]
    d = arr[..., y1[:, None], x1[None, :]]
    return (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d)


def smooth_field(rng, size, magnitude, grid=4):
    """Random smooth 2-channel displacement field with the given RMS length."""
    coarse = rng.normal(size=(2, grid, grid))
    f = _bilinear_resize(coarse, size, size)
    rms = np.sqrt(np.mean(f[0] ** 2 + f[1] ** 2))
    if rms > 0 and magnitude > 0:
        f = f * (magnitude / rms)
    else:
        f = np.zeros_like(f)
    return f


def warp_channels(channels, field):
    """Backward-warp [C,H,W] by a displacement field [2,H,W] (edge clamped)."""
    C, H, W = channels.shape
    yy, xx = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    sy = np.clip(yy - field[0], 0.0, H - 1.0)
    sx = np.clip(xx - field[1], 0.0, W - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    ty = sy - y0
    tx = sx - x0
    out = np.empty_like(channels)
    for c in range(C):
        ch = channels[c]
        out[c] = (1 - ty) * ((1 - tx) * ch[y0, x0] + tx * ch[y0, x1]) + ty * (
            (1 - tx) * ch[y1, x0] + tx * ch[y1, x1]
        )
    return out


def _gaussian_bumps(rng, size, count):
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((size, size))
    for _ in range(count):
        cy, cx = rng.uniform(0, size - 1, size=2)
        sigma = rng.uniform(size * 0.08, size * 0.25)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    peak = img.max()
    return img / peak if peak > 0 else img


def _render_he(density, texture):
    r = np.clip(0.92 - 0.55 * density + 0.20 * texture, 0.0, 1.0)
    g = np.clip(0.58 - 0.40 * density + 0.10 * texture, 0.0, 1.0)
    b = np.clip(0.88 - 0.25 * density + 0.16 * texture, 0.0, 1.0)
    return np.stack([r, g, b])


def generate_volume(config: GeneratorConfig, seed: int):
    """One synthetic volume: lists of STPatch and HEPatch, index-aligned."""
    if config.slices < 3:
        raise ValueError(f"need at least 3 slices, got {config.slices}")
    if config.genes < 2:
        raise ValueError(f"need at least 2 genes, got {config.genes}")
    if config.size < 4:
        raise ValueError(f"patch size too small: {config.size}")
    rng = np.random.default_rng(seed)
    N, S, K = config.genes, config.size, config.slices

    programs = np.stack([_gaussian_bumps(rng, S, config.blobs) for _ in range(config.programs)])
    loading_rng = rng if config.gene_seed is None else np.random.default_rng(config.gene_seed)
    loadings = loading_rng.uniform(0.1, 1.0, size=(N, config.programs))
    base = np.einsum("np,phw->nhw", loadings, programs)
    base += 0.15 * np.stack([_gaussian_bumps(rng, S, 2) for _ in range(N)])
    texture = _gaussian_bumps(rng, S, config.blobs * 2)

    gene_stack = np.empty((K, N, S, S))
    tex_stack = np.empty((K, S, S))
    gene_stack[0] = base
    tex_stack[0] = texture
    for k in range(1, K):
        fld = smooth_field(rng, S, config.deform)
        warped = warp_channels(gene_stack[k - 1], fld)
        factors = 1.0 + rng.normal(0.0, config.drift, size=N) if config.drift > 0 else np.ones(N)
        gene_stack[k] = np.maximum(warped * factors[:, None, None], 0.0)
        tex_stack[k] = warp_channels(tex_stack[k - 1][None], fld)[0]

    # normalize each gene over the whole volume so metrics with MAX=1 are
    # well defined, then zero the low-intensity tail to mimic sparse genes
    lo = gene_stack.min(axis=(0, 2, 3), keepdims=True)
    hi = gene_stack.max(axis=(0, 2, 3), keepdims=True)
    gene_stack = (gene_stack - lo) / np.maximum(hi - lo, 1e-9)
    density = gene_stack.mean(axis=1)
    if config.sparsity > 0:
        thresh = np.quantile(gene_stack, config.sparsity, axis=(0, 2, 3))
        gene_stack = np.where(gene_stack < thresh[None, :, None, None], 0.0, gene_stack)

    sts, hes = [], []
    for k in range(K):
        sts.append(STPatch(genes=gene_stack[k].copy(), slice_index=k))
        hes.append(HEPatch(rgb=_render_he(density[k], tex_stack[k]), slice_index=k))
    return sts, hes


def make_tuples(sts, hes, s):
    """All sliding windows of s+2 consecutive slices -> SliceTuple list."""
    if s < 1:
        raise ValueError(f"tuple span s must be >= 1, got {s}")
    if len(sts) != len(hes):
        raise ValueError("ST and H&E stacks differ in length")
    if len(sts) < s + 2:
        raise ValueError(f"volume of {len(sts)} slices cannot host windows of {s + 2}")
    tuples = []
    for j in range(len(sts) - s - 1):
        tuples.append(
            SliceTuple(
                anchors=(sts[j], sts[j + s + 1]),
                he_anchors=(hes[j], hes[j + s + 1]),
                targets=[sts[j + 1 + i] for i in range(s)],
            )
        )
    return tuples


# ----------------------------------------------------------------------
# patch and dataset I/O
# ----------------------------------------------------------------------


def save_patch(patch, path):
    arr = patch.genes if isinstance(patch, STPatch) else patch.rgb
    write_ctf(path, arr.astype(np.float64, copy=False))


def load_patch(path):
    """Read a patch back; the st_/he_ filename prefix selects the kind."""
    path = Path(path)
    arr = read_ctf(path)
    if arr.ndim != 3:
        raise ValueError(f"patch file must be 3-d, got shape {arr.shape}: {path}")
    stem = path.stem
    try:
        kind, index = stem.split("_", 1)
        index = int(index)
    except ValueError:
        raise ValueError(f"patch filename must look like st_<i>.ctf or he_<i>.ctf: {path}") from None
    if kind == "st":
        return STPatch(genes=arr, slice_index=index)
    if kind == "he":
        return HEPatch(rgb=arr, slice_index=index)
    raise ValueError(f"unknown patch kind '{kind}' in {path}")


def split_counts(volumes, ratio):
    total = sum(ratio)
    n_train = int(round(volumes * ratio[0] / total))
    n_val = int(round(volumes * ratio[1] / total))
    if volumes >= 3:
        n_train = max(n_train, 1)
        n_val = max(n_val, 1)
        n_train = min(n_train, volumes - 2)
        n_val = min(n_val, volumes - n_train - 1)
    n_test = volumes - n_train - n_val
    return {"train": n_train, "val": n_val, "test": n_test}


def write_dataset(root, config: GeneratorConfig, seed: int):
    """Generate and persist a dataset as root/{train,val,test}/vol_<k>/...."""
    root = Path(root)
    if config.gene_seed is None:
        # one gene-loading draw for the whole dataset: volumes share gene
        # identities, only tissue layout and deformation vary
        config = replace(config, gene_seed=derive_seed(seed, 2**40))
    counts = split_counts(config.volumes, config.split_ratio)
    manifest = {
        "seed": seed,
        "splits": counts,
        "generator": asdict(config),
        "volume_seeds": {},
    }
    k = 0
    for split in SPLIT_NAMES:
        for _ in range(counts[split]):
            vol_seed = derive_seed(seed, k)
            sts, hes = generate_volume(config, vol_seed)
            vol_dir = root / split / f"vol_{k}"
            for st, he in zip(sts, hes):
                save_patch(st, vol_dir / f"st_{st.slice_index}.ctf")
                save_patch(he, vol_dir / f"he_{he.slice_index}.ctf")
            manifest["volume_seeds"][f"vol_{k}"] = vol_seed
            k += 1
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(root):
    return json.loads((Path(root) / "manifest.json").read_text())


def load_split(root, split):
    """Load every volume of a split as (sts, hes) pairs, ordered by index."""
    split_dir = Path(root) / split
    if not split_dir.exists():
        raise FileNotFoundError(f"no such split directory: {split_dir}")
    volumes = []
    for vol_dir in sorted(split_dir.iterdir(), key=lambda p: int(p.name.split("_")[1])):
        st_files = sorted(vol_dir.glob("st_*.ctf"), key=lambda p: int(p.stem.split("_")[1]))
        sts = [load_patch(p) for p in st_files]
        hes = [load_patch(vol_dir / f"he_{st.slice_index}.ctf") for st in sts]
        volumes.append((sts, hes))
    return volumes


def split_tuples(root, split, s):
    tuples = []
    for sts, hes in load_split(root, split):
        tuples.extend(make_tuples(sts, hes, s))
    return tuples


def _transform_patch(patch, rot, flip):
    arr = patch.genes if isinstance(patch, STPatch) else patch.rgb
    out = np.rot90(arr, k=rot, axes=(1, 2))
    if flip:
        out = out[:, :, ::-1]
    out = np.ascontiguousarray(out)
    if isinstance(patch, STPatch):
        return STPatch(genes=out, slice_index=patch.slice_index)
    return HEPatch(rgb=out, slice_index=patch.slice_index)


def augment_tuples(tuples, rotations=(0, 1, 2, 3), flips=(False, True)):
    """Expand tuples with the dihedral symmetries of the patch grid.

    Every member of a tuple (both anchors, both H&E images, all targets)
    receives the same rotation/flip, so spatial registration is preserved.
    The identity transform comes first, so ``augment_tuples(t)[:len(t)]``
    reproduces the originals.
    """
    out = []
    for rot in rotations:
        for flip in flips:
            for t in tuples:
                if rot == 0 and not flip:
                    out.append(t)
                    continue
                out.append(SliceTuple(
                    anchors=tuple(_transform_patch(p, rot, flip) for p in t.anchors),
                    he_anchors=tuple(_transform_patch(p, rot, flip) for p in t.he_anchors),
                    targets=[_transform_patch(p, rot, flip) for p in t.targets],
                ))
    return out
