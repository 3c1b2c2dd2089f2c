import logging
import os

import numpy as np
import pandas as pd

from core.curve import PolygonalCurve, edge_geometry

logger = logging.getLogger(__name__)


def read_curve(path):
    """Load a closed curve from CSV with header `x,y`, one vertex per row"""
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != ["x", "y"]:
        raise ValueError(f"{path}: expected header 'x,y', got {','.join(map(str, frame.columns))}")
    curve = PolygonalCurve(frame[["x", "y"]].to_numpy(dtype=float))
    edge_geometry(curve)
    logger.debug("Loaded %d vertices from %s", curve.n, path)
    return curve


def write_curve(curve, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame = pd.DataFrame(np.asarray(curve.vertices), columns=["x", "y"])
    frame.to_csv(path, index=False, float_format="%.17g")
    return path
