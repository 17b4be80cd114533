"""
Data Module for CLIPin Desk
Deterministic synthetic image-caption pairs with controllable semantic
looseness and redundancy, batch streaming with two augmented views per
modality, and the on-disk pair format (TSV records + PPM images).
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.stats import halfnorm
from torch.utils.data import DataLoader, Dataset

from config.config import MASK_TOKEN_ID, PAD_TOKEN_ID, AugmentConfig, LatentSpec
from core.augment import augment_image, augment_text
from core.errors import BatchTooSmall, EmptyDataset, MalformedRecord
from core.numerics import DTYPE, Rng, Tensor
from core.preprocess import load_image, save_ppm

logger = logging.getLogger(__name__)

PAIR_FILE = "pairs.tsv"
LABEL_FILE = "labels.tsv"
MASK_WORD = "[MASK]"


class TokenCodebook:
    """
    Fixed vocabulary: id 0 pad, id 1 mask, then one token per
    (latent dim, sign, half-normal quantile bucket).
    """

    def __init__(self, k: int, buckets: int = 4):
        self.k = k
        self.buckets = buckets
        self.thresholds = halfnorm.ppf(np.arange(1, buckets) / buckets)

    @property
    def vocab_size(self) -> int:
        return 2 + self.k * 2 * self.buckets

    def token_id(self, dim: int, positive: bool, bucket: int) -> int:
        return 2 + dim * 2 * self.buckets + int(positive) * self.buckets + bucket

    def decode(self, token: int) -> Tuple[int, bool, int]:
        """Returns (latent dim, positive sign, bucket) of a content token."""
        if token < 2 or token >= self.vocab_size:
            raise ValueError(f"token {token} is not a codebook entry")
        offset = token - 2
        dim, rest = divmod(offset, 2 * self.buckets)
        sign, bucket = divmod(rest, self.buckets)
        return dim, bool(sign), bucket

    def encode_latent(self, z: np.ndarray) -> List[int]:
        buckets = np.searchsorted(self.thresholds, np.abs(z))
        return [self.token_id(j, z[j] > 0, int(buckets[j])) for j in range(len(z))]

    def word(self, token: int) -> str:
        if token == MASK_TOKEN_ID:
            return MASK_WORD
        dim, positive, bucket = self.decode(token)
        return f"z{dim}{'p' if positive else 'n'}{bucket}"

    def lookup(self, word: str) -> Optional[int]:
        if word == MASK_WORD:
            return MASK_TOKEN_ID
        if len(word) < 4 or word[0] != "z" or word[-2] not in "pn":
            return None
        try:
            dim, bucket = int(word[1:-2]), int(word[-1])
        except ValueError:
            return None
        if not (0 <= dim < self.k and 0 <= bucket < self.buckets):
            return None
        return self.token_id(dim, word[-2] == "p", bucket)

    def class_prompt(self, cls: int, max_text_len: int) -> torch.Tensor:
        """Canonical prompt for a class attribute: its strongest positive token."""
        return pad_tokens([self.token_id(cls, True, self.buckets - 1)], max_text_len)


def pad_tokens(tokens: Sequence[int], max_text_len: int) -> torch.Tensor:
    out = torch.full((max_text_len,), PAD_TOKEN_ID, dtype=torch.long)
    kept = list(tokens)[:max_text_len]
    out[: len(kept)] = torch.as_tensor(kept, dtype=torch.long)
    return out


@dataclass
class Sample:
    id: str
    image: Tensor
    tokens: torch.Tensor
    labels: torch.Tensor
    primary: int = -1
    latent: Optional[np.ndarray] = None


@dataclass
class PairDataset:
    ids: List[str]
    images: Tensor
    tokens: torch.Tensor
    labels: torch.Tensor
    primary: torch.Tensor
    stats: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], stats: Optional[Dict[str, int]] = None) -> "PairDataset":
        if not samples:
            raise EmptyDataset("no samples")
        return cls(
            ids=[s.id for s in samples],
            images=torch.stack([s.image for s in samples]),
            tokens=torch.stack([s.tokens for s in samples]),
            labels=torch.stack([s.labels for s in samples]),
            primary=torch.as_tensor([s.primary for s in samples], dtype=torch.long),
            stats=dict(stats or {}),
        )

    def subset(self, index: Sequence[int]) -> "PairDataset":
        idx = torch.as_tensor(list(index), dtype=torch.long)
        return PairDataset([self.ids[i] for i in idx.tolist()], self.images[idx], self.tokens[idx],
                           self.labels[idx], self.primary[idx], dict(self.stats))

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update("\n".join(self.ids).encode("utf-8"))
        for t in (self.images.to(DTYPE), self.tokens, self.labels.to(torch.uint8), self.primary):
            digest.update(t.contiguous().numpy().tobytes())
        return digest.hexdigest()


@dataclass
class PairBatch:
    images_v1: Tensor
    images_v2: Tensor
    tokens_v1: torch.Tensor
    tokens_v2: torch.Tensor
    labels: torch.Tensor
    ids: List[str]

    def __len__(self) -> int:
        return len(self.ids)


class SyntheticPairGenerator:
    """
    Draws (image, caption, labels) triples from a shared latent z.

    The image is a fixed random projection of z, the caption one codebook
    token per latent dim; both live on separate sub-streams of ``rng``.
    A ``sample_stream`` label keeps the projection but draws a disjoint set
    of samples.
    """

    def __init__(self, spec: LatentSpec, rng: Rng, image_side: int = 16, max_text_len: int = 16,
                 channels: int = 3, sample_stream: Optional[str] = None):
        self.spec = spec.validate()
        self.image_shape = (channels, image_side, image_side)
        self.max_text_len = max_text_len
        self.codebook = TokenCodebook(spec.k, spec.quantile_buckets)
        self.projection = rng.child("projection").normal(size=(int(np.prod(self.image_shape)), spec.k))
        samples = rng if sample_stream is None else rng.child(sample_stream)
        self._latent = samples.child("latent")
        self._noise = samples.child("noise")
        self._loose = samples.child("looseness")
        self._redundant = samples.child("redundancy")
        self.cache: List[np.ndarray] = []
        self.count = 0

    def _draw_latent(self) -> np.ndarray:
        reuse = self._redundant.random() < self.spec.redundancy_rate
        if reuse and self.cache:
            return self.cache[int(self._redundant.integers(0, len(self.cache)))].copy()
        z = self._latent.normal(size=self.spec.k)
        self.cache.append(z)
        return z.copy()

    def caption_tokens(self, z: np.ndarray) -> List[int]:
        tokens = self.codebook.encode_latent(z)
        if self._loose.random() < self.spec.looseness_rate:
            keep = self._loose.random(self.spec.k) < 0.5
            if not keep.any():
                keep[int(self._loose.integers(0, self.spec.k))] = True
            tokens = [t for t, kept in zip(tokens, keep) if kept]
        return tokens

    def render_image(self, z: np.ndarray) -> Tensor:
        pre = self.projection @ z / np.sqrt(self.spec.k)
        pixels = 1.0 / (1.0 + np.exp(-pre))
        if self.spec.noise_sigma > 0:
            pixels = pixels + self._noise.normal(size=pixels.shape, scale=self.spec.noise_sigma)
        return torch.from_numpy(np.clip(pixels, 0.0, 1.0).reshape(self.image_shape)).to(DTYPE)

    def gen_sample(self) -> Sample:
        z = self._draw_latent()
        classes = self.spec.classes
        sample = Sample(
            id=f"s{self.count:06d}",
            image=self.render_image(z),
            tokens=pad_tokens(self.caption_tokens(z), self.max_text_len),
            labels=torch.from_numpy(z[:classes] > 0),
            primary=int(np.argmax(z[:classes])),
            latent=z,
        )
        self.count += 1
        return sample


def generate_corpus(spec: LatentSpec, n: int, rng: Rng, image_side: int = 16, max_text_len: int = 16,
                    sample_stream: Optional[str] = None) -> PairDataset:
    """
    Generate ``n`` synthetic pairs from the "data" sub-stream of ``rng``.

    Corpora with different ``sample_stream`` labels share the image projection
    and codebook but hold different samples.

    Returns:
        PairDataset: A pure function of (spec, seed, n, geometry)
    """
    generator = SyntheticPairGenerator(spec, rng.child("data"), image_side, max_text_len,
                                       sample_stream=sample_stream)
    dataset = PairDataset.from_samples([generator.gen_sample() for _ in range(n)])
    logger.info(f"Generated synthetic corpus: {n} pairs, k={spec.k}, classes={spec.classes}, "
                f"looseness={spec.looseness_rate}, redundancy={spec.redundancy_rate}")
    return dataset


class BatchStream:
    """
    Epoch-shuffled, drop-last batches with fresh augmentations.

    ``batch(step)`` is a pure function of (dataset, seed, step), so a resumed
    run sees exactly the batches an uninterrupted run would.
    """

    def __init__(self, dataset: PairDataset, batch_size: int, aug: AugmentConfig, rng: Rng,
                 vocab_size: Optional[int] = None):
        if batch_size < 2 or len(dataset) < batch_size:
            raise BatchTooSmall(f"need 2 <= batch_size <= dataset size, got batch_size={batch_size}, "
                                f"n={len(dataset)}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.aug = aug.validate()
        self.vocab_size = vocab_size
        self._shuffle = rng.child("shuffle")
        self._augment = rng.child(aug.seed_stream)
        self.batches_per_epoch = len(dataset) // batch_size
        self._orders: Dict[int, np.ndarray] = {}

    def epoch_order(self, epoch: int) -> np.ndarray:
        if epoch not in self._orders:
            self._orders = {epoch: self._shuffle.child(epoch).permutation(len(self.dataset))}
        return self._orders[epoch]

    def batch(self, step: int) -> PairBatch:
        epoch, offset = divmod(step, self.batches_per_epoch)
        index = self.epoch_order(epoch)[offset * self.batch_size:(offset + 1) * self.batch_size]
        views: List[Tuple[Tensor, Tensor, torch.Tensor, torch.Tensor]] = []
        stream = self._augment.child(epoch)
        for i in index.tolist():
            sample_rng = stream.child(int(i))
            img1, img2 = augment_image(self.dataset.images[i], self.aug, sample_rng.child("image"))
            tok1, tok2 = augment_text(self.dataset.tokens[i], self.aug, sample_rng.child("text"), self.vocab_size)
            views.append((img1, img2, tok1, tok2))
        idx = torch.as_tensor(index, dtype=torch.long)
        return PairBatch(
            images_v1=torch.stack([v[0] for v in views]),
            images_v2=torch.stack([v[1] for v in views]),
            tokens_v1=torch.stack([v[2] for v in views]),
            tokens_v2=torch.stack([v[3] for v in views]),
            labels=self.dataset.labels[idx],
            ids=[self.dataset.ids[i] for i in index.tolist()],
        )

    def iter_from(self, step: int, stop: Optional[int] = None) -> Iterator[PairBatch]:
        while stop is None or step < stop:
            yield self.batch(step)
            step += 1


def make_batches(dataset: PairDataset, batch_size: int, aug: AugmentConfig, rng: Rng,
                 epochs: int = 1, vocab_size: Optional[int] = None) -> Iterator[PairBatch]:
    """
    Stream ``epochs`` epochs of augmented batches.

    Raises:
        BatchTooSmall: If the dataset holds fewer than ``batch_size`` samples
    """
    stream = BatchStream(dataset, batch_size, aug, rng, vocab_size)
    return stream.iter_from(0, epochs * stream.batches_per_epoch)


class StepBatches(Dataset):
    """Map-style view of a BatchStream: item ``i`` is the batch for step ``start + i``."""

    def __init__(self, stream: BatchStream, start: int, stop: int):
        self.stream = stream
        self.start = start
        self.stop = stop

    def __len__(self) -> int:
        return max(0, self.stop - self.start)

    def __getitem__(self, i: int) -> PairBatch:
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self.stream.batch(self.start + i)


def _as_is(batch: PairBatch) -> PairBatch:
    return batch


def prefetch(stream: BatchStream, start: int, stop: int, depth: int) -> Iterator[PairBatch]:
    """
    Batches for steps ``[start, stop)`` in order.

    With ``depth > 0`` one DataLoader worker builds up to ``depth`` batches
    ahead; depth 0 builds them on the calling thread.
    """
    if depth <= 0:
        return stream.iter_from(start, stop)
    loader = DataLoader(StepBatches(stream, start, stop), batch_size=None, shuffle=False, num_workers=1,
                        prefetch_factor=depth, collate_fn=_as_is)
    return iter(loader)


def captions_of(dataset: PairDataset, codebook: TokenCodebook) -> List[str]:
    return [" ".join(codebook.word(int(t)) for t in row if int(t) != PAD_TOKEN_ID) for row in dataset.tokens]


def export_corpus(dataset: PairDataset, out_dir, codebook: TokenCodebook) -> str:
    """
    Write the pair file, PPM images and labels table.

    Args:
        dataset (PairDataset): Corpus to export
        out_dir (str): Target directory (created if missing)
        codebook (TokenCodebook): Maps token ids to caption words

    Returns:
        str: sha256 over every written file, in a fixed order
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (sample_id, caption) in enumerate(zip(dataset.ids, captions_of(dataset, codebook))):
        relative = Path("images") / f"{sample_id}.ppm"
        save_ppm(dataset.images[i], out_dir / relative)
        rows.append(f"{sample_id}\t{relative.as_posix()}\t{caption}")
    (out_dir / PAIR_FILE).write_text("\n".join(rows) + "\n", encoding="utf-8")

    labels = pd.DataFrame({
        "id": dataset.ids,
        "labels": ["".join(str(int(b)) for b in row) for row in dataset.labels.to(torch.uint8)],
        "primary": dataset.primary.tolist(),
    })
    labels.to_csv(out_dir / LABEL_FILE, sep="\t", index=False)
    logger.info(f"Exported {len(dataset)} pairs to {out_dir}")
    return directory_hash(out_dir)


def directory_hash(out_dir) -> str:
    out_dir = Path(out_dir)
    digest = hashlib.sha256()
    for path in sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name != "manifest.json"):
        digest.update(path.relative_to(out_dir).as_posix().encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def tokenize_caption(caption: str, codebook: TokenCodebook, max_text_len: int,
                     stats: Dict[str, int]) -> torch.Tensor:
    """Whitespace + codebook tokenizer; unknown words become the mask id, overflow is truncated."""
    ids = []
    for word in caption.split():
        token = codebook.lookup(word)
        if token is None:
            stats["unknown_tokens"] = stats.get("unknown_tokens", 0) + 1
            token = MASK_TOKEN_ID
        ids.append(token)
    if len(ids) > max_text_len:
        stats["truncated"] = stats.get("truncated", 0) + 1
    return pad_tokens(ids, max_text_len)


def _read_labels(path: Path, classes: int) -> Dict[str, Tuple[torch.Tensor, int]]:
    if not path.exists():
        return {}
    frame = pd.read_csv(path, sep="\t", dtype={"id": str, "labels": str})
    table = {}
    for _, row in frame.iterrows():
        bits = torch.as_tensor([c == "1" for c in str(row["labels"])][:classes], dtype=torch.bool)
        table[str(row["id"])] = (bits, int(row.get("primary", -1)))
    return table


def load_pairs(path, codebook: TokenCodebook, image_side: int = 16, max_text_len: int = 16,
               classes: int = 8) -> PairDataset:
    """
    Load a pair file (``id<TAB>relative_image_path<TAB>caption`` per line).

    Labels come from a ``labels.tsv`` next to the pair file when present.

    Args:
        path (str): Pair file
        codebook (TokenCodebook): Caption vocabulary
        image_side (int): Model input side
        max_text_len (int): Token budget per caption
        classes (int): Label width

    Returns:
        PairDataset: With ``stats`` counting unknown tokens and truncated captions

    Raises:
        EmptyDataset: If the file holds no records
        MalformedRecord: If a line does not have three tab-separated fields or its caption is empty
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Pair file not found: {path}")
    labels = _read_labels(path.parent / LABEL_FILE, classes)
    stats: Dict[str, int] = {"unknown_tokens": 0, "truncated": 0}
    samples = []
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields_ = line.split("\t")
        if len(fields_) != 3 or not fields_[0] or not fields_[1]:
            raise MalformedRecord(f"expected 'id<TAB>image_path<TAB>caption', got {len(fields_)} fields", line_number)
        sample_id, image_path, caption = fields_
        if not caption.split():
            raise MalformedRecord("empty caption", line_number)
        try:
            image = load_image(path.parent / image_path, image_side)
        except (FileNotFoundError, ValueError) as e:
            raise MalformedRecord(str(e), line_number) from e
        bits, primary = labels.get(sample_id, (torch.zeros(classes, dtype=torch.bool), -1))
        samples.append(Sample(sample_id, image, tokenize_caption(caption, codebook, max_text_len, stats),
                              bits, primary))
    if not samples:
        raise EmptyDataset(f"no records in {path}")
    if stats["unknown_tokens"]:
        logger.warning(f"{stats['unknown_tokens']} unknown caption words mapped to the mask token")
    if stats["truncated"]:
        logger.warning(f"{stats['truncated']} captions truncated to {max_text_len} tokens")
    logger.info(f"Loaded {len(samples)} pairs from {path}")
    return PairDataset.from_samples(samples, stats)
