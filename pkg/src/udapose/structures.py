"""Shared record types: pose instances and annotated samples."""
from dataclasses import dataclass, field

import numpy as np

KEYPOINT_NAMES = (
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
    "head", "neck",
)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)
# (a, b) index pairs drawn as limbs
SKELETON = (
    (12, 13), (13, 0), (13, 1), (0, 2), (2, 4), (1, 3), (3, 5),
    (0, 6), (1, 7), (6, 7), (6, 8), (8, 10), (7, 9), (9, 11),
)
# falloff constants of the CrowdPose evaluation protocol, in CrowdPose order
CROWDPOSE_SIGMAS = (
    0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089, 0.079, 0.079,
)

DOMAIN_TAGS = ("well_lit", "low_light_ref", "synthetic_low_light", "low_light_test")


@dataclass
class PoseInstance:
    """One person. Box is (cx, cy, w, h) and keypoints are (x, y), all
    normalised to [0, 1] by image width/height. ``visibility`` is only set on
    ground truth (0 out of frame, 1 occluded, 2 visible)."""

    score: float
    box: np.ndarray
    keypoints: np.ndarray
    visibility: np.ndarray = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(4)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(NUM_KEYPOINTS, 2)
        if self.visibility is not None:
            self.visibility = np.asarray(self.visibility, dtype=np.int64).reshape(NUM_KEYPOINTS)

    @property
    def area(self):
        """Box area in normalised units."""
        return float(self.box[2] * self.box[3])

    def box_xyxy(self):
        cx, cy, w, h = self.box
        return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])

    def to_json(self, width, height):
        cx, cy, w, h = self.box
        kps = []
        vis = self.visibility if self.visibility is not None else np.full(NUM_KEYPOINTS, 2)
        for (x, y), v in zip(self.keypoints, vis):
            kps.extend([round(float(x * width), 4), round(float(y * height), 4), int(v)])
        return {
            "bbox": [round(float((cx - w / 2) * width), 4), round(float((cy - h / 2) * height), 4),
                     round(float(w * width), 4), round(float(h * height), 4)],
            "keypoints": kps,
            "num_keypoints": int(np.sum(vis > 0)),
            "score": round(float(self.score), 6),
        }

    @classmethod
    def from_json(cls, ann, width, height):
        x, y, w, h = ann["bbox"]
        kps = np.asarray(ann["keypoints"], dtype=np.float64).reshape(NUM_KEYPOINTS, 3)
        return cls(
            score=float(ann.get("score", 1.0)),
            box=[(x + w / 2) / width, (y + h / 2) / height, w / width, h / height],
            keypoints=kps[:, :2] / np.array([width, height]),
            visibility=kps[:, 2].astype(np.int64),
        )


@dataclass
class AnnotatedSample:
    image: np.ndarray
    instances: list
    source_id: str
    domain_tag: str = "well_lit"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]
