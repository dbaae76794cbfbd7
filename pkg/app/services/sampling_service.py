import logging
import math
from typing import Optional, Sequence

import numpy as np

from app.core.exceptions import InvalidInputError
from app.core.rng import RandomStream
from app.schemas.cloud import (
    CloudMeta, PointCloud, RotateOp, SamplingSpec, ScaleOp, TransformOp, TranslateOp, Window, rotation_matrix
)

logger = logging.getLogger(__name__)


class SamplingService:

    @staticmethod
    def sample_poisson(spec: SamplingSpec) -> PointCloud:
        """
        Exact Poisson construction on the padded window:
        N ~ Poisson(γ|W|), then N i.i.d. uniform points.
        """
        window = spec.padded_window
        if not (math.isfinite(spec.intensity) and spec.intensity >= 0):
            raise InvalidInputError(f"intensity must be finite and >= 0, got {spec.intensity}")
        if not (window.area > 0 and math.isfinite(window.area)):
            raise InvalidInputError("degenerate sampling window")

        rng = spec.stream.generator()
        mean = spec.intensity * window.area
        n = int(rng.poisson(mean)) if mean > 0 else 0
        local = (rng.random((n, 2)) - 0.5) * np.array([window.width, window.height])
        points = window.to_global(local)
        if n and len(np.unique(points, axis=0)) != n:
            # Coincident draws have probability zero; keep the first copy.
            _, first = np.unique(points, axis=0, return_index=True)
            logger.warning(f"⚠️ Dropped {n - len(first)} coincident Poisson points")
            points = points[np.sort(first)]

        logger.info(f"🎲 Sampled {len(points)} Poisson points (γ={spec.intensity}, mean={mean:.1f})")
        return PointCloud(
            points=points,
            window=window,
            meta=CloudMeta(seed=spec.stream.seed, intensity=spec.intensity, source="poisson"),
        )

    @staticmethod
    def lattice_cloud(window: Window, spacing: float, jitter: float = 0.0,
                      stream: Optional[RandomStream] = None) -> PointCloud:
        """
        Cell-centered lattice ``lower + h(k + 1/2)`` covering the window,
        each point displaced uniformly in the ball of radius ``jitter``.
        """
        if not (spacing > 0 and math.isfinite(spacing)):
            raise InvalidInputError(f"spacing must be > 0, got {spacing}")
        if not (0 <= jitter < spacing / 2):
            raise InvalidInputError(f"jitter must lie in [0, h/2), got {jitter}")

        nx = int(math.floor(window.width / spacing + 1e-9))
        ny = int(math.floor(window.height / spacing + 1e-9))
        xs = -window.width / 2 + spacing * (np.arange(nx) + 0.5)
        ys = -window.height / 2 + spacing * (np.arange(ny) + 0.5)
        gx, gy = np.meshgrid(xs, ys)
        local = np.column_stack([gx.ravel(), gy.ravel()])

        seed = None
        if jitter > 0:
            if stream is None:
                raise InvalidInputError("a random stream is required when jitter > 0")
            rng = stream.generator()
            radius = jitter * np.sqrt(rng.random(len(local)))
            phi = 2 * np.pi * rng.random(len(local))
            local = local + np.column_stack([radius * np.cos(phi), radius * np.sin(phi)])
        if stream is not None:
            seed = stream.seed

        return PointCloud(
            points=window.to_global(local),
            window=window,
            meta=CloudMeta(seed=seed, intensity=1.0 / spacing ** 2, source="lattice"),
        )

    @staticmethod
    def transform_cloud(cloud: PointCloud, op: TransformOp) -> PointCloud:
        """Map points and window by scale (s > 0), translate or rotate about the origin."""
        w = cloud.window
        if isinstance(op, ScaleOp):
            if not op.factor > 0:
                raise InvalidInputError(f"scale factor must be > 0, got {op.factor}")
            points = cloud.points * op.factor
            window = Window(center=(w.center[0] * op.factor, w.center[1] * op.factor),
                            width=w.width * op.factor, height=w.height * op.factor, angle=w.angle)
        elif isinstance(op, TranslateOp):
            v = np.asarray(op.offset, dtype=float)
            points = cloud.points + v
            window = Window(center=tuple(np.asarray(w.center) + v), width=w.width, height=w.height, angle=w.angle)
        elif isinstance(op, RotateOp):
            rot = rotation_matrix(op.angle)
            points = cloud.points @ rot.T
            window = Window(center=tuple(rot @ np.asarray(w.center)), width=w.width, height=w.height,
                            angle=w.angle + op.angle)
        else:
            raise InvalidInputError(f"unknown transform {op!r}")

        meta = cloud.meta.model_copy(update={"transforms": cloud.meta.transforms + (op,)})
        return PointCloud(points=points, ids=cloud.ids, window=window, meta=meta)

    @staticmethod
    def scale(cloud: PointCloud, factor: float) -> PointCloud:
        if not factor > 0:
            raise InvalidInputError(f"scale factor must be > 0, got {factor}")
        return SamplingService.transform_cloud(cloud, ScaleOp(factor=factor))

    @staticmethod
    def rotate(cloud: PointCloud, angle: float) -> PointCloud:
        return SamplingService.transform_cloud(cloud, RotateOp(angle=angle))

    @staticmethod
    def translate(cloud: PointCloud, offset: Sequence[float]) -> PointCloud:
        return SamplingService.transform_cloud(cloud, TranslateOp(offset=tuple(offset)))
