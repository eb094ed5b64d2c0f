"""Retrieval-augmented sample construction for captioning and VQA datasets.

Every ablation row of the captioning and VQA result tables is a named
:class:`AblationMode`. A mode picks which retrieved text parts go into the
context slot and whether the retrieved image is concatenated to the right of
the query image.

Missing-data policy:

* captioning keeps only records whose retrieval has both captions and an
  image (mode ``none`` keeps everything);
* VQA keeps every record and fills an absent context with the empty string.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence, TextIO, Union

import numpy as np
from PIL import Image

from .errors import FormatError, RavenError
from .retriever import MappedCaptions, RetrievalResult

TASKS = ("captioning", "vqa")
TEXT_PARTS = ("top_caption", "all_captions", "alt_text")
STATUSES = ("full", "captions_only", "missing")

CAPTION_PROMPT = "What does the image describe?"
DEFAULT_MAX_SOURCE_LENGTH = 600
DEFAULT_SEPARATOR_TOKEN = "</context>"
PART_SEPARATOR = " | "
CAPTION_JOINER = " ; "

RAW_COLUMNS = {
    "captioning": ("sample_id", "image_ref", "caption"),
    "vqa": ("sample_id", "image_ref", "question", "answer"),
}
APPENDED_COLUMNS = ("retrieved_context", "retrieval_status")
COMPOSITE_COLUMN = "composite_image_ref"

Tokenizer = Callable[[str], Sequence[str]]


def whitespace_tokenize(text: str) -> list[str]:
    return text.split()


@dataclass(frozen=True)
class AblationMode:
    name: str
    task: str
    text_parts: tuple[str, ...] = ()
    use_image: bool = False

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise RavenError(f"unknown task {self.task!r}")
        unknown = [p for p in self.text_parts if p not in TEXT_PARTS]
        if unknown:
            raise RavenError(f"unknown text part(s) {unknown}")
        if len(set(self.text_parts)) != len(self.text_parts):
            raise RavenError("text parts must not repeat")
        if self.task == "vqa" and self.use_image:
            raise RavenError("vqa modes are text-only")
        if not self.text_parts and not self.use_image and self.name != "none":
            raise RavenError(f"mode {self.name!r} selects nothing; only 'none' may")

    @property
    def retrieves(self) -> bool:
        return bool(self.text_parts) or self.use_image


def _modes(task: str, rows: Iterable[tuple[str, tuple[str, ...], bool]]) -> dict[str, AblationMode]:
    return {name: AblationMode(name, task, parts, img) for name, parts, img in rows}


CAPTIONING_MODES = _modes(
    "captioning",
    [
        ("none", (), False),
        ("top_caption", ("top_caption",), False),
        ("alt_text", ("alt_text",), False),
        ("all_captions_concatenated", ("all_captions",), False),
        ("top_caption_all_captions", ("top_caption", "all_captions"), False),
        ("top_caption_all_captions_alttext", ("top_caption", "all_captions", "alt_text"), False),
        ("image", (), True),
        ("image_top_caption_all_captions", ("top_caption", "all_captions"), True),
    ],
)

VQA_MODES = _modes(
    "vqa",
    [
        ("none", (), False),
        ("alttext", ("alt_text",), False),
        ("alttext_all_captions", ("alt_text", "all_captions"), False),
        ("top_caption_all_captions", ("top_caption", "all_captions"), False),
    ],
)

MODES = {"captioning": CAPTIONING_MODES, "vqa": VQA_MODES}


def get_mode(task: str, name: str) -> AblationMode:
    if task not in MODES:
        raise RavenError(f"unknown task {task!r}")
    try:
        return MODES[task][name]
    except KeyError:
        raise RavenError(
            f"unknown {task} mode {name!r}; choose from {', '.join(MODES[task])}"
        ) from None


@dataclass
class AugmentConfig:
    max_source_length: int = DEFAULT_MAX_SOURCE_LENGTH
    separator_token: str = DEFAULT_SEPARATOR_TOKEN
    part_separator: str = PART_SEPARATOR
    caption_joiner: str = CAPTION_JOINER
    caption_prompt: str = CAPTION_PROMPT
    context_first: bool = True
    # False restricts the captioning subset filter to image modes only.
    subset_text_modes: bool = True
    tokenizer: Tokenizer = whitespace_tokenize

    def __post_init__(self) -> None:
        if self.max_source_length < 1:
            raise RavenError("max_source_length must be >= 1")
        if not self.separator_token or any(c.isspace() for c in self.separator_token):
            raise RavenError("separator token must be a single non-empty token")

    @property
    def separator(self) -> str:
        return f" {self.separator_token} "


# -- text ----------------------------------------------------------------------


def build_text_context(
    mode: AblationMode,
    mapped: Optional[MappedCaptions],
    alt_text: Optional[str],
    config: Optional[AugmentConfig] = None,
) -> str:
    """Join the mode's text parts in declared order.

    Absent parts are empty strings and are skipped, so a fully missing
    retrieval yields ``""``.
    """
    cfg = config or AugmentConfig()
    values = {
        "top_caption": mapped.top_caption if mapped else "",
        "all_captions": cfg.caption_joiner.join(mapped.all_captions) if mapped else "",
        "alt_text": alt_text or "",
    }
    parts = [values[p].strip() for p in mode.text_parts]
    return cfg.part_separator.join(p for p in parts if p)


def compose_input(context: str, prompt: str, config: Optional[AugmentConfig] = None) -> tuple[str, str]:
    """Attach ``context`` to ``prompt`` under the source-length limit.

    Returns ``(input_text, context_kept)``. Only the context is ever cut (from
    its end, on whitespace boundaries); the prompt survives verbatim.
    """
    cfg = config or AugmentConfig()
    tok = cfg.tokenizer
    limit = cfg.max_source_length

    def join(ctx: str) -> str:
        return ctx + cfg.separator + prompt if cfg.context_first else prompt + cfg.separator + ctx

    if len(tok(prompt)) > limit:
        raise RavenError(f"prompt alone has more than {limit} tokens")
    full = join(context)
    if len(tok(full)) <= limit:
        return full, context
    words = context.split()
    lo, hi = 0, len(words)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if len(tok(join(" ".join(words[:mid])))) <= limit:
            lo = mid
        else:
            hi = mid - 1
    kept = " ".join(words[:lo])
    text = join(kept)
    if len(tok(text)) > limit:
        return prompt, ""
    return text, kept


# -- images --------------------------------------------------------------------


@dataclass(frozen=True)
class RgbImage:
    """Row-major 8-bit RGB image; ``pixels`` has shape ``(height, width, 3)``."""

    width: int
    height: int
    pixels: np.ndarray = field(compare=False)

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise RavenError(f"image dimensions must be >= 1, got {self.width}x{self.height}")
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.size != 3 * self.width * self.height:
            raise RavenError("pixel buffer length must be 3 * width * height")
        px = px.reshape(self.height, self.width, 3)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RgbImage):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def filled(cls, width: int, height: int, rgb: Sequence[int]) -> "RgbImage":
        if width < 1 or height < 1:
            raise RavenError(f"image dimensions must be >= 1, got {width}x{height}")
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = np.asarray(rgb, dtype=np.uint8)
        return cls(width, height, px)

    @classmethod
    def from_pil(cls, img: Image.Image) -> "RgbImage":
        arr = np.asarray(img.convert("RGB"))
        return cls(arr.shape[1], arr.shape[0], arr)

    def to_pil(self) -> Image.Image:
        return Image.fromarray(np.array(self.pixels), mode="RGB")


def load_png(path: Union[str, Path]) -> RgbImage:
    with Image.open(path) as img:
        return RgbImage.from_pil(img)


def save_png(image: RgbImage, path: Union[str, Path]) -> int:
    """Write ``image`` as PNG and return the number of bytes written."""
    buf = io.BytesIO()
    image.to_pil().save(buf, format="PNG")
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return len(data)


def scaled_width(width: int, height: int, target_height: int) -> int:
    """Width after scaling to ``target_height`` with aspect preserved (round half up)."""
    return max(1, (2 * width * target_height + height) // (2 * height))


def resize_nearest(image: RgbImage, width: int, height: int) -> RgbImage:
    """Nearest-neighbour resample sampling source pixel centres."""
    if width < 1 or height < 1:
        raise RavenError("target dimensions must be >= 1")
    xs = np.minimum(((2 * np.arange(width) + 1) * image.width) // (2 * width), image.width - 1)
    ys = np.minimum(((2 * np.arange(height) + 1) * image.height) // (2 * height), image.height - 1)
    return RgbImage(width, height, image.pixels[ys[:, None], xs[None, :]])


def concat_images(query: RgbImage, retrieved: Optional[RgbImage] = None) -> RgbImage:
    """Place the retrieved image (or a copy of the query) right of the query.

    The right-hand image is rescaled to the query height with its aspect ratio
    kept, so the output is ``query.width + scaled_width`` wide.
    """
    right = query if retrieved is None else retrieved
    w = scaled_width(right.width, right.height, query.height)
    scaled = right if (w, query.height) == (right.width, right.height) else resize_nearest(right, w, query.height)
    pixels = np.concatenate([query.pixels, scaled.pixels], axis=1)
    return RgbImage(query.width + w, query.height, pixels)


# -- samples -------------------------------------------------------------------


@dataclass
class RawDataset:
    task: str
    fieldnames: list[str]
    rows: list[dict[str, str]]

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise RavenError(f"unknown task {self.task!r}")
        missing = [c for c in RAW_COLUMNS[self.task] if c not in self.fieldnames]
        if missing:
            raise FormatError(f"{self.task} dataset lacks column(s): {', '.join(missing)}")


def read_dataset(source: Union[str, Path, TextIO], task: str) -> RawDataset:
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_dataset(fh, task)
    reader = csv.DictReader(source, delimiter="\t")
    fieldnames = list(reader.fieldnames or [])
    return RawDataset(task, fieldnames, [dict(r) for r in reader])


def _writer(fh: TextIO) -> Any:
    return csv.writer(fh, delimiter="\t", lineterminator="\n")


def serialize_rows(fieldnames: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = _writer(buf)
    w.writerow(fieldnames)
    w.writerows(rows)
    return buf.getvalue()


def serialize_raw(dataset: RawDataset, rows: Optional[Iterable[dict[str, str]]] = None) -> str:
    """Pass-through serialization of raw rows (all rows by default)."""
    rows = dataset.rows if rows is None else rows
    return serialize_rows(dataset.fieldnames, ([r.get(c) or "" for c in dataset.fieldnames] for r in rows))


@dataclass
class AugmentedSample:
    sample_id: str
    image: Union[str, RgbImage]
    input_text: str
    target_text: str
    retrieval_status: str
    context: str = ""
    record: dict[str, str] = field(default_factory=dict, repr=False)


def validate_record(task: str, record: Mapping[str, Optional[str]]) -> None:
    for col in RAW_COLUMNS[task]:
        if record.get(col) is None:
            raise FormatError(f"record lacks field {col!r}")
    if not record["sample_id"]:
        raise FormatError("record has empty field 'sample_id'")
    if task == "vqa" and not record["question"]:
        raise FormatError(f"record {record['sample_id']!r} has empty field 'question'")


def keeps_record(mode: AblationMode, status: str, config: AugmentConfig) -> bool:
    if mode.task == "vqa" or not mode.retrieves:
        return True
    if mode.use_image or config.subset_text_modes:
        return status == "full"
    return True


ImageLoader = Callable[[str], Optional[RgbImage]]


def build_sample(
    record: Mapping[str, str],
    retrieval: Optional[RetrievalResult],
    mode: AblationMode,
    prompt: Optional[str] = None,
    config: Optional[AugmentConfig] = None,
    image_loader: Optional[ImageLoader] = None,
) -> Optional[AugmentedSample]:
    """Assemble one augmented sample, or ``None`` when the task policy drops it.

    ``prompt`` defaults to the captioning prompt for captioning records and to
    the record's question for VQA.
    """
    cfg = config or AugmentConfig()
    validate_record(mode.task, record)
    if prompt is None:
        prompt = cfg.caption_prompt if mode.task == "captioning" else record["question"]
    target = record["caption"] if mode.task == "captioning" else record["answer"]
    status = retrieval.status if retrieval is not None else "missing"
    sid = record["sample_id"]

    if not mode.retrieves:
        return AugmentedSample(sid, record["image_ref"], prompt, target, status, "", dict(record))
    if not keeps_record(mode, status, cfg):
        return None

    context = ""
    if status != "missing" and mode.text_parts:
        source = retrieval.caption_source  # type: ignore[union-attr]
        context = build_text_context(mode, source.mapped, source.alt_text, cfg)  # type: ignore[union-attr]
    input_text, context = compose_input(context, prompt, cfg) if mode.text_parts else (prompt, "")

    image: Union[str, RgbImage] = record["image_ref"]
    if mode.use_image:
        if image_loader is None:
            raise RavenError(f"mode {mode.name!r} needs an image loader")
        query = image_loader(record["image_ref"])
        if query is None:
            raise RavenError(f"query image {record['image_ref']!r} of {sid!r} could not be read")
        top1 = retrieval.top1 if retrieval is not None else None
        retrieved = image_loader(top1.image_ref) if top1 is not None else None
        image = concat_images(query, retrieved)
    return AugmentedSample(sid, image, input_text, target, status, context, dict(record))


@dataclass
class DatasetReport:
    task: str
    mode: str
    total_records: int = 0
    with_captions: int = 0
    with_captions_and_image: int = 0
    emitted: int = 0
    join_misses: int = 0
    status_counts: dict[str, int] = field(default_factory=lambda: {s: 0 for s in STATUSES})
    bytes_without_retrieval: int = 0
    bytes_with_retrieval: int = 0
    composite_image_bytes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def output_columns(dataset: RawDataset, mode: AblationMode) -> list[str]:
    if not mode.retrieves:
        return list(dataset.fieldnames)
    cols = list(dataset.fieldnames) + list(APPENDED_COLUMNS)
    if mode.use_image:
        cols.append(COMPOSITE_COLUMN)
    return cols


def emit_dataset(
    dataset: RawDataset,
    retrievals: Mapping[str, RetrievalResult],
    mode: AblationMode,
    sink: TextIO,
    config: Optional[AugmentConfig] = None,
    image_loader: Optional[ImageLoader] = None,
    image_dir: Optional[Union[str, Path]] = None,
    image_ref_base: Optional[Union[str, Path]] = None,
) -> DatasetReport:
    """Stream augmented rows to ``sink`` in input order and return coverage counts.

    Composite images (image modes) are written to ``image_dir`` as
    ``<sample_id>.png``; the TSV references them relative to ``image_ref_base``
    when given.
    """
    cfg = config or AugmentConfig()
    if mode.task != dataset.task:
        raise RavenError(f"mode {mode.name!r} is for {mode.task}, dataset is {dataset.task}")
    if mode.use_image and image_dir is None:
        raise RavenError("image modes need an image_dir for composites")
    report = DatasetReport(dataset.task, mode.name)
    columns = output_columns(dataset, mode)
    header = serialize_rows(columns, [])
    sink.write(header)
    report.bytes_with_retrieval = len(header.encode("utf-8"))
    kept_raw: list[dict[str, str]] = []

    for record in dataset.rows:
        report.total_records += 1
        retrieval = retrievals.get(record.get("sample_id") or "")
        if retrieval is None:
            report.join_misses += 1
        status = retrieval.status if retrieval is not None else "missing"
        report.status_counts[status] += 1
        report.with_captions += status in ("full", "captions_only")
        report.with_captions_and_image += status == "full"

        sample = build_sample(record, retrieval, mode, None, cfg, image_loader)
        if sample is None:
            continue
        report.emitted += 1
        kept_raw.append(record)
        row = [record.get(c) or "" for c in dataset.fieldnames]
        if mode.retrieves:
            row += [sample.context, sample.retrieval_status]
        if mode.use_image:
            assert isinstance(sample.image, RgbImage) and image_dir is not None
            png = Path(image_dir) / f"{sample.sample_id}.png"
            report.composite_image_bytes += save_png(sample.image, png)
            ref = os.path.relpath(png, image_ref_base) if image_ref_base is not None else str(png)
            row.append(Path(ref).as_posix())
        line = _row_text(row)
        sink.write(line)
        report.bytes_with_retrieval += len(line.encode("utf-8"))

    report.bytes_without_retrieval = len(serialize_raw(dataset, kept_raw).encode("utf-8"))
    return report


def _row_text(row: Sequence[str]) -> str:
    buf = io.StringIO()
    _writer(buf).writerow(row)
    return buf.getvalue()


def write_report(report: DatasetReport, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
