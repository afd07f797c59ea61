use vssd_web::demo::{erf_grid, mixing_matrix, route_consistency, ErfKind, MixKind};

#[test]
fn erf_grids() {
    let nc = erf_grid(ErfKind::Ncssd, 16, 0).unwrap();
    assert_eq!(nc.len(), 256);
    assert!(nc.iter().all(|&v| v > 0.0));
    let dw = erf_grid(ErfKind::DwConv, 16, 0).unwrap();
    assert_eq!(dw.iter().filter(|&&v| v > 0.0).count(), 49);
    assert_eq!(dw.iter().copied().fold(0.0, f64::max), 1.0);
}

#[test]
fn causal_matrix_is_lower_triangular_and_ncssd_is_dense() {
    let l = 12;
    let c = mixing_matrix(MixKind::Causal, l, 1).unwrap();
    let n = mixing_matrix(MixKind::Ncssd, l, 1).unwrap();
    for i in 0..l {
        for j in 0..l {
            if j > i {
                assert_eq!(c[i * l + j], 0.0);
            }
            assert!(n[i * l + j] > 0.0);
        }
    }
}

#[test]
fn routes_leave_ncssd_unchanged() {
    let rows = route_consistency(4, 5, 2).unwrap();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert_eq!(r.ncssd_diff, 0.0, "{r:?}");
        if r.route != "identity" {
            assert!(r.causal_diff > 0.0, "{r:?}");
        }
    }
}
