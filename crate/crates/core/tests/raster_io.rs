use greenprior::io::render::{gray_pixels, mask_path, render_map, ColorRamp};
use greenprior::io::{read_grid, write_grid};
use greenprior::raster::{Grid, GridGeoref};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = Grid> {
    (1usize..12, 1usize..12, -1e6..1e6f64, -1e6..1e6f64, 0.01..1e3f64).prop_flat_map(
        |(ncols, nrows, x, y, cell)| {
            let cell_value = prop_oneof![
                1 => Just(-9999.0),
                4 => any::<f64>().prop_filter("finite", |v| v.is_finite()),
                2 => -1e3..1e3f64,
            ];
            prop::collection::vec(cell_value, ncols * nrows).prop_map(move |values| {
                let georef = GridGeoref::new(ncols, nrows, x, y, cell, -9999.0).unwrap();
                Grid::new("g", georef, values).unwrap()
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn asc_write_read_is_bit_exact(grid in grid_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.asc");
        write_grid(&grid, &path).unwrap();
        let back = read_grid(&path).unwrap();
        prop_assert_eq!(back.georef, grid.georef);
        for (a, b) in back.values().iter().zip(grid.values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.valid_count(), grid.valid_count());
    }

    #[test]
    fn pgm_mask_marks_exactly_the_nodata_cells(grid in grid_strategy()) {
        let (gray, mask) = gray_pixels(&grid);
        let g = &grid.georef;
        for (k, (&px, &m)) in gray.iter().zip(&mask).enumerate() {
            let (img_row, col) = (k / g.ncols, k % g.ncols);
            let v = grid.get(g.nrows - 1 - img_row, col);
            prop_assert_eq!(m == 255, v == -9999.0);
            if v != -9999.0 {
                prop_assert_eq!(px, (255.0 * v.clamp(0.0, 1.0)).round() as u8);
            }
        }
    }
}

#[test]
fn rendered_files_have_one_byte_per_cell() {
    let georef = GridGeoref::new(7, 5, 0.0, 0.0, 10.0, -9999.0).unwrap();
    let grid = Grid::from_fn("g", georef, |r, c| if (r + c) % 4 == 0 { -9999.0 } else { c as f64 / 6.0 });
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("map.pgm");
    render_map(&grid, &ColorRamp::grayscale(), &p).unwrap();
    let header = b"P5\n7 5\n255\n".len();
    assert_eq!(std::fs::read(&p).unwrap().len(), header + 35);
    let mask = std::fs::read(mask_path(&p)).unwrap();
    assert_eq!(mask[header..].iter().filter(|&&m| m == 255).count(), 35 - grid.valid_count());
}
