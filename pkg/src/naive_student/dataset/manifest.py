"""Dataset manifests: the frame/sequence/split record behind every run.

On disk a manifest is tab-separated text::

    #NSMANIFEST 1
    @image_size	64	96
    @labeled_index	19
    @ego_rect	58	64	0	96          (optional: row0 row1 col0 col1)
    @class	1	road	stuff
    sequence_id	frame_index	image_path	label_path	ego_void_path	split_tags
    seq0000	0	images/seq0000/000.png	-	-	train-sequence

Paths are stored relative to the manifest's directory; ``-`` marks an absent
path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

from ..types import ClassInfo, ClassTable

SPLIT_TAGS = frozenset({"train-fine", "val-fine", "train-sequence", "val-sequence", "train-extra"})
HEADER = "#NSMANIFEST 1"
COLUMNS = ("sequence_id", "frame_index", "image_path", "label_path", "ego_void_path", "split_tags")
DEFAULT_LABELED_INDEX = 19


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class FrameRecord:
    sequence_id: str
    frame_index: int
    image_path: str
    label_path: Optional[str] = None
    ego_void_path: Optional[str] = None
    split_tags: FrozenSet[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "split_tags", frozenset(self.split_tags))
        unknown = self.split_tags - SPLIT_TAGS
        if unknown:
            raise ManifestError(f"unknown split tags {sorted(unknown)}")
        if not 0 <= self.frame_index:
            raise ManifestError(f"negative frame index {self.frame_index}")

    @property
    def key(self) -> str:
        return f"{self.sequence_id}/{self.frame_index:03d}"

    @property
    def labeled(self) -> bool:
        return self.label_path is not None

    def replace(self, **changes) -> "FrameRecord":
        return dataclasses.replace(self, **changes)


@dataclass
class DatasetManifest:
    class_table: ClassTable
    frames: List[FrameRecord]
    image_size: Tuple[int, int]
    root: Path = field(default_factory=Path)
    labeled_index: int = DEFAULT_LABELED_INDEX
    ego_rect: Optional[Tuple[int, int, int, int]] = None

    def __post_init__(self):
        self.class_table = ClassTable(self.class_table)
        self.root = Path(self.root)
        self.image_size = tuple(int(v) for v in self.image_size)
        seen = set()
        for f in self.frames:
            if f.key in seen:
                raise ManifestError(f"duplicate frame {f.key}")
            seen.add(f.key)
            if f.labeled and f.frame_index != self.labeled_index and "train-extra" not in f.split_tags:
                raise ManifestError(f"{f.key}: only frame {self.labeled_index} of a sequence may be labeled")
            if "train-fine" in f.split_tags and "train-sequence" not in f.split_tags:
                raise ManifestError(f"{f.key}: train-fine frames must also be train-sequence")

    def path(self, relative: Optional[str]) -> Optional[Path]:
        return None if relative is None else self.root / relative

    def split(self, tag: str) -> List[FrameRecord]:
        if tag not in SPLIT_TAGS:
            raise KeyError(f"unknown split {tag!r}")
        return [f for f in self.frames if tag in f.split_tags]

    def sequences(self) -> Dict[str, List[FrameRecord]]:
        out: Dict[str, List[FrameRecord]] = {}
        for f in self.frames:
            out.setdefault(f.sequence_id, []).append(f)
        return out

    def labeled_frames(self) -> List[FrameRecord]:
        return [f for f in self.frames if f.labeled]

    def with_frames(self, frames: Iterable[FrameRecord]) -> "DatasetManifest":
        return dataclasses.replace(self, frames=list(frames))

    # -- text format ----------------------------------------------------------

    def to_text(self) -> str:
        lines = [HEADER, f"@image_size\t{self.image_size[0]}\t{self.image_size[1]}",
                 f"@labeled_index\t{self.labeled_index}"]
        if self.ego_rect is not None:
            lines.append("@ego_rect\t" + "\t".join(str(v) for v in self.ego_rect))
        for c in self.class_table:
            lines.append(f"@class\t{c.id}\t{c.name}\t{c.kind}")
        lines.append("\t".join(COLUMNS))
        for f in self.frames:
            lines.append("\t".join([
                f.sequence_id, str(f.frame_index), f.image_path,
                f.label_path or "-", f.ego_void_path or "-", ",".join(sorted(f.split_tags)),
            ]))
        return "\n".join(lines) + "\n"

    def save(self, destination) -> None:
        destination = Path(destination)
        destination.write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, root=".") -> "DatasetManifest":
        lines = text.splitlines()
        if not lines or lines[0].strip() != HEADER:
            raise ManifestError("missing manifest header")
        classes, frames = [], []
        image_size, labeled_index, ego_rect = None, DEFAULT_LABELED_INDEX, None
        in_body = False
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if not in_body:
                if cols[0] == "@image_size":
                    image_size = (int(cols[1]), int(cols[2]))
                elif cols[0] == "@labeled_index":
                    labeled_index = int(cols[1])
                elif cols[0] == "@ego_rect":
                    ego_rect = tuple(int(v) for v in cols[1:5])
                elif cols[0] == "@class":
                    classes.append(ClassInfo(int(cols[1]), cols[2], cols[3]))
                elif tuple(cols) == COLUMNS:
                    in_body = True
                else:
                    raise ManifestError(f"line {lineno}: unexpected header entry {cols[0]!r}")
                continue
            if len(cols) != len(COLUMNS):
                raise ManifestError(f"line {lineno}: expected {len(COLUMNS)} columns, got {len(cols)}")
            seq, idx, img, label, ego, tags = cols
            frames.append(FrameRecord(
                seq, int(idx), img, None if label == "-" else label, None if ego == "-" else ego,
                frozenset(t for t in tags.split(",") if t)))
        if image_size is None:
            raise ManifestError("manifest lacks @image_size")
        return cls(ClassTable(classes), frames, image_size, Path(root), labeled_index, ego_rect)

    @classmethod
    def load(cls, source) -> "DatasetManifest":
        source = Path(source)
        return cls.from_text(source.read_text(), root=source.parent)
