//! Orthomosaic tiling into fixed-size, non-overlapping patches.

use super::{Raster, Sample};
use crate::confmap::{Frame, PointSet};
use crate::error::{Error, Result};

/// Cut a raster into a grid of `patch x patch` tiles, dropping edge
/// remainders smaller than a patch. Each point lands in the unique tile
/// containing it under half-open `[x0, x0 + patch)` intervals, with
/// coordinates rebased to the tile origin. Points in dropped margins are
/// discarded with the margins.
pub fn tile(raster: &Raster, points: &PointSet, patch: usize) -> Result<Vec<Sample>> {
    if points.frame() != Frame::Image {
        return Err(Error::invalid("tile expects image-frame points"));
    }
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if raster.w < patch || raster.h < patch {
        return Err(Error::Dataset(format!(
            "raster {}x{} smaller than patch {patch}",
            raster.w, raster.h
        )));
    }
    let tiles_x = raster.w / patch;
    let tiles_y = raster.h / patch;

    let mut tile_points: Vec<Vec<(f64, f64)>> = vec![Vec::new(); tiles_x * tiles_y];
    for &(x, y) in points.points() {
        let tx = (x / patch as f64).floor() as usize;
        let ty = (y / patch as f64).floor() as usize;
        if tx < tiles_x && ty < tiles_y {
            tile_points[ty * tiles_x + tx].push((x - (tx * patch) as f64, y - (ty * patch) as f64));
        }
    }

    let mut samples = Vec::with_capacity(tiles_x * tiles_y);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut image = Raster::new(patch, patch);
            for y in 0..patch {
                let src = ((ty * patch + y) * raster.w + tx * patch) * 3;
                let dst = y * patch * 3;
                image.data[dst..dst + patch * 3].copy_from_slice(&raster.data[src..src + patch * 3]);
            }
            samples.push(Sample::new(
                format!("tile_{ty}_{tx}"),
                image,
                std::mem::take(&mut tile_points[ty * tiles_x + tx]),
            )?);
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster_with_coords(w: usize, h: usize) -> Raster {
        let mut r = Raster::new(w, h);
        for y in 0..h {
            for x in 0..w {
                r.set_pixel(x, y, ((x % 256) as u8, (y % 256) as u8, 9));
            }
        }
        r
    }

    #[test]
    fn grid_arithmetic_and_rebasing() {
        let raster = raster_with_coords(1024, 1024);
        let points = PointSet::new(vec![(513.0, 10.0), (100.0, 900.0)], Frame::Image, 1024.0, 1024.0).unwrap();
        let tiles = tile(&raster, &points, 512).unwrap();
        assert_eq!(tiles.len(), 4);
        let t01 = tiles.iter().find(|t| t.id == "tile_0_1").unwrap();
        assert_eq!(t01.points, vec![(1.0, 10.0)]);
        let t10 = tiles.iter().find(|t| t.id == "tile_1_0").unwrap();
        assert_eq!(t10.points, vec![(100.0, 388.0)]);
        // pixel content is rebased with the points
        assert_eq!(t01.image.pixel(1, 10), ((513 % 256) as u8, 10, 9));
    }

    #[test]
    fn edge_remainders_are_dropped() {
        let raster = raster_with_coords(1030, 1030);
        // one point inside the margin, one inside a kept tile
        let points = PointSet::new(vec![(1027.0, 5.0), (5.0, 5.0)], Frame::Image, 1030.0, 1030.0).unwrap();
        let tiles = tile(&raster, &points, 512).unwrap();
        assert_eq!(tiles.len(), 4);
        let total: usize = tiles.iter().map(|t| t.count()).sum();
        assert_eq!(total, 1, "margin point discarded with the margin");
    }

    #[test]
    fn boundary_points_assign_to_the_containing_tile() {
        let raster = raster_with_coords(64, 64);
        let points = PointSet::new(vec![(32.0, 0.0), (31.9, 0.0)], Frame::Image, 64.0, 64.0).unwrap();
        let tiles = tile(&raster, &points, 32).unwrap();
        let t00 = tiles.iter().find(|t| t.id == "tile_0_0").unwrap();
        let t01 = tiles.iter().find(|t| t.id == "tile_0_1").unwrap();
        assert_eq!(t00.points, vec![(31.9, 0.0)]);
        assert_eq!(t01.points, vec![(0.0, 0.0)], "half-open interval owns the boundary");
    }

    #[test]
    fn small_rasters_are_rejected() {
        let raster = raster_with_coords(100, 600);
        let points = PointSet::empty(Frame::Image, 100.0, 600.0);
        assert!(tile(&raster, &points, 512).is_err());
    }
}
