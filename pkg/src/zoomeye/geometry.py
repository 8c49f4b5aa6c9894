"""Bounding-box arithmetic, image-tree construction, cropping and paste assembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from PIL import Image


class InputMode(str, Enum):
    """What the oracle sees per query: only the patch, or full image plus patch."""

    LOCAL = "local"
    GLOBAL_LOCAL = "global_local"


class ResizePolicy(str, Enum):
    """How the serving model is assumed to downscale large inputs."""

    NAIVE = "naive"
    SERVER_SIDE = "server_side"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel rectangle, (x, y) is the top-left corner.

    Half-open on both axes: a pixel (px, py) belongs to the box when
    x <= px < x + w and y <= py < y + h.
    """

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"bbox needs positive size, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"bbox origin must be non-negative, got ({self.x}, {self.y})")

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2, self.y + self.h / 2)

    def contains_point(self, px: float, py: float) -> bool:
        return self.x <= px < self.right and self.y <= py < self.bottom

    def contains_box(self, other: "BBox") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and other.right <= self.right
            and other.bottom <= self.bottom
        )

    def intersection_area(self, other: "BBox") -> int:
        iw = min(self.right, other.right) - max(self.x, other.x)
        ih = min(self.bottom, other.bottom) - max(self.y, other.y)
        if iw <= 0 or ih <= 0:
            return 0
        return iw * ih

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class TreeNode:
    """One patch of the image tree.

    ``cached_confidences`` memoizes oracle scores keyed by
    (confidence kind, cue or question text); it is owned by a single
    search run over the tree instance.
    """

    id: int
    bbox: BBox
    depth: int
    children: list[int] = field(default_factory=list)
    cached_confidences: dict[tuple[str, str], float] = field(default_factory=dict)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class ImageTree:
    """Hierarchical decomposition of an image; nodes[0] is the root (depth 0)."""

    width: int
    height: int
    nodes: list[TreeNode]
    depth: int

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    def node(self, node_id: int) -> TreeNode:
        return self.nodes[node_id]

    def __len__(self) -> int:
        return len(self.nodes)


def _split_boxes(bbox: BBox, aspect_threshold: float) -> list[BBox]:
    """Children of a split node: 2 halves along the longer axis when the box is
    elongated (aspect ratio >= threshold), otherwise a 2x2 grid.

    Integer halving puts the remainder pixel in the trailing child on each
    axis. Ordering is deterministic: left/top first, quads row-major.
    """
    w, h = bbox.w, bbox.h
    if max(w, h) / min(w, h) >= aspect_threshold:
        if w >= h:
            left = w // 2
            return [
                BBox(bbox.x, bbox.y, left, h),
                BBox(bbox.x + left, bbox.y, w - left, h),
            ]
        top = h // 2
        return [
            BBox(bbox.x, bbox.y, w, top),
            BBox(bbox.x, bbox.y + top, w, h - top),
        ]
    left, top = w // 2, h // 2
    right, bottom = w - left, h - top
    return [
        BBox(bbox.x, bbox.y, left, top),
        BBox(bbox.x + left, bbox.y, right, top),
        BBox(bbox.x, bbox.y + top, left, bottom),
        BBox(bbox.x + left, bbox.y + top, right, bottom),
    ]


def build_tree(
    width: int,
    height: int,
    min_node_size: int,
    aspect_threshold: float = 1.5,
) -> ImageTree:
    """Build the image tree for a width x height canvas.

    A node is split iff its longer side exceeds ``min_node_size``. Node ids
    are assigned in breadth-first order, so construction is deterministic:
    identical inputs give identical ids, boxes and child ordering.
    """
    if width < 1 or height < 1:
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    if min_node_size < 1:
        raise ValueError(f"min_node_size must be positive, got {min_node_size}")
    if aspect_threshold < 1:
        raise ValueError(f"aspect_threshold must be >= 1, got {aspect_threshold}")

    nodes = [TreeNode(0, BBox(0, 0, width, height), 0)]
    index = 0
    while index < len(nodes):
        node = nodes[index]
        index += 1
        if max(node.bbox.w, node.bbox.h) <= min_node_size:
            continue
        for child_box in _split_boxes(node.bbox, aspect_threshold):
            child = TreeNode(len(nodes), child_box, node.depth + 1)
            nodes.append(child)
            node.children.append(child.id)
    return ImageTree(width, height, nodes, max(n.depth for n in nodes))


def union_bbox(boxes: Sequence[BBox]) -> BBox:
    """Minimal axis-aligned box containing every input box."""
    if not boxes:
        raise ValueError("union_bbox needs at least one box")
    x = min(b.x for b in boxes)
    y = min(b.y for b in boxes)
    right = max(b.right for b in boxes)
    bottom = max(b.bottom for b in boxes)
    return BBox(x, y, right - x, bottom - y)


def crop_view(image: Image.Image, bbox: BBox) -> Image.Image:
    """Pixel-exact sub-image of ``bbox``. No resampling."""
    if bbox.right > image.width or bbox.bottom > image.height:
        raise ValueError(
            f"bbox {bbox.as_tuple()} exceeds image bounds {image.width}x{image.height}"
        )
    return image.crop((bbox.x, bbox.y, bbox.right, bbox.bottom))


@dataclass(frozen=True)
class AnswerVisual:
    """Visual context fed to the oracle for the final answer."""

    images: tuple[Image.Image, ...]
    union: BBox
    pasted: bool


def assemble_answer_visual(
    image: Image.Image,
    result_nodes: Sequence[TreeNode],
    mode: InputMode,
    resize_policy: ResizePolicy = ResizePolicy.NAIVE,
    paste_longer_side: int = 1000,
) -> AnswerVisual:
    """Assemble the zoomed visual input from the searched nodes.

    Global+local mode always pairs the full image with the plain union crop.
    Local mode with naive resizing pastes each node's crop onto a black
    canvas of the union's size when the union's longer side exceeds
    ``paste_longer_side``; otherwise (and always with server-side resizing)
    the plain union crop is used.
    """
    if not result_nodes:
        raise ValueError("assemble_answer_visual needs at least one node")
    union = union_bbox([node.bbox for node in result_nodes])
    if mode is InputMode.GLOBAL_LOCAL:
        return AnswerVisual((image, crop_view(image, union)), union, pasted=False)
    if resize_policy is ResizePolicy.NAIVE and max(union.w, union.h) > paste_longer_side:
        canvas = Image.new(image.mode, (union.w, union.h), 0)
        for node in result_nodes:
            canvas.paste(crop_view(image, node.bbox), (node.bbox.x - union.x, node.bbox.y - union.y))
        return AnswerVisual((canvas,), union, pasted=True)
    return AnswerVisual((crop_view(image, union),), union, pasted=False)
