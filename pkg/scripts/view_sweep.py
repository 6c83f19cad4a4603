"""Render an orbit strip (yaw sweep) from a trained checkpoint.

Usage: python scripts/view_sweep.py --checkpoint runs/desk/model.alod \
           --data runs/desk/data [--frame 0] [--lod 0.0] [--out strip.png]
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from alod.checkpoint import load_checkpoint
from alod.dataset import load_dataset
from alod.geometry import orbit_camera
from alod.images import save_image
from alod.model import forward_frame


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--frame", type=int, default=0)
    parser.add_argument("--lod", type=float, default=0.0)
    parser.add_argument("--yaw-max", type=float, default=50.0,
                        help="sweep endpoint in degrees")
    parser.add_argument("--views", type=int, default=7)
    parser.add_argument("--out", default="view_strip.png")
    args = parser.parse_args()

    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    sample = ds.frames[args.frame]
    center, _ = model.mesh.bounding_sphere()

    panels = []
    for yaw in np.linspace(-args.yaw_max, args.yaw_max, args.views):
        cam = orbit_camera(sample.camera, np.deg2rad(yaw), 0.0, center=center)
        fwd = forward_frame(model, sample.expr, cam, args.lod)
        panels.append(np.clip(fwd.image, 0.0, 1.0))
        print(f"yaw {yaw:+6.1f} deg: {len(fwd.gaussians)} gaussians")
    save_image(np.concatenate(panels, axis=1), args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
