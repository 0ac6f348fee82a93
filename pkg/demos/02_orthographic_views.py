"""Render the six depth-resolved orthographic views of a plant cloud.

Each view sweeps a pixel grid along one axis: a pixel keeps the first point
it meets, so the raster is what a viewer on that side would see, and each
occupied pixel remembers which 3D point produced it.
"""

from pathlib import Path

from bloompose import Aabb, ALL_VIEWS, make_plant, project_view, save_png

out_dir = Path("demo_output/02_views")
out_dir.mkdir(parents=True, exist_ok=True)

scene = make_plant(n_flowers=5, bed=Aabb([-0.3, -0.3, 0.0], [0.3, 0.3, 0.35]),
                   foliage_density=80_000, seed=7)
print(f"projecting {len(scene.cloud)} points at 768x768, splat radius 8 px")

for direction in ALL_VIEWS:
    view = project_view(scene.cloud, direction, width=768, height=768, resolution=8)
    occupied = int((view.grid >= 0).sum())
    save_png(view.image, out_dir / f"view_{direction.label}.png")
    print(f"  view {direction.label}: {occupied:6d} first-hit pixels "
          f"({100 * occupied / len(scene.cloud):.1f}% of the cloud visible)")

print(f"rasters written to {out_dir}/")
