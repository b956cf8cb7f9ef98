#!/usr/bin/env python3
"""Walk the editing operations on the synthetic dressed cylinder.

Renders a contact strip per edit: original, Top removed, Pants recolored,
Top extracted alone, and every asset transferred onto a taller body.
"""

import argparse

import numpy as np

from splatavatar import io as sio
from splatavatar.editing import (extract_group, recolor_group, remove_group,
                                 transfer_group)
from splatavatar.rasterizer import render
from splatavatar.scene import GaussianSet, LAYER_ASSET
from splatavatar.skinning import repose
from splatavatar.synthetic import (PANTS_CATEGORY, TOP_CATEGORY,
                                   cylinder_mesh, ground_truth_scene,
                                   orbit_cameras)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="output strip PNG")
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    mesh = cylinder_mesh()
    scene = ground_truth_scene(mesh, seed=args.seed)
    cam = orbit_cameras(mesh, n_views=4, width=args.size,
                        height=args.size)[0]

    tall = cylinder_mesh()
    tall.vertices = tall.vertices * np.array([1.0, 1.25, 1.0])
    panels = [
        ("original", scene, mesh),
        ("top removed", remove_group(scene, TOP_CATEGORY), mesh),
        ("pants recolored",
         recolor_group(scene, PANTS_CATEGORY, (0.85, 0.75, 0.1)), mesh),
        ("top extracted", extract_group(scene, TOP_CATEGORY, mesh)[0], mesh),
        ("transferred",
         GaussianSet.concatenate([
             ground_truth_scene(tall, seed=args.seed).select(
                 ground_truth_scene(tall, seed=args.seed).layer
                 != LAYER_ASSET),
             transfer_group(scene.select(scene.layer == LAYER_ASSET),
                            mesh, tall)]), tall),
    ]
    strip = []
    for name, g, m in panels:
        out, _ = render(g, repose(g, m), cam)
        strip.append(out.color)
        print(f"rendered: {name}")
    sio.save_image(np.concatenate(strip, axis=1), args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
