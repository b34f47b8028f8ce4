use std::ffi::CString;
use std::ptr;

use viewsplat_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { vs_last_error(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
    assert_eq!(s.len(), n.min(255));
    s
}

#[test]
fn reconstruct_render_and_export_through_handles() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(vs_model_new(7, &mut model), VsStatus::Ok);
        let mut views = ptr::null_mut();
        let kind = CString::new("box").unwrap();
        let scheme = CString::new("two-tone").unwrap();
        assert_eq!(vs_views_generate(kind.as_ptr(), scheme.as_ptr(), 300, 1, &mut views), VsStatus::Ok);
        assert_eq!(vs_views_count(views), 64);

        let idx = [16usize, 24, 40];
        let mut cloud = ptr::null_mut();
        assert_eq!(vs_reconstruct(model, views, idx.as_ptr(), idx.len(), &mut cloud), VsStatus::Ok);
        assert_eq!(vs_cloud_count(cloud), 4096);
        let mut g = [0.0; VS_GAUSSIAN_FLOATS];
        assert_eq!(vs_cloud_get(cloud, 5, g.as_mut_ptr()), VsStatus::Ok);
        assert!(g[6] > 0.0 && g[6] < 1.0);
        let qn: f64 = g[10..].iter().map(|v| v * v).sum();
        assert!((qn - 1.0).abs() < 1e-6);
        assert_eq!(vs_cloud_get(cloud, 4096, g.as_mut_ptr()), VsStatus::InvalidArgument);

        let mut rgb = vec![0.0; 64 * 64 * 3];
        assert_eq!(vs_render(cloud, views, 33, rgb.as_mut_ptr(), rgb.len()), VsStatus::Ok);
        assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(vs_render(cloud, views, 33, rgb.as_mut_ptr(), 10), VsStatus::BufferTooSmall);
        let mut p = 0.0;
        assert_eq!(vs_view_psnr(cloud, views, 33, &mut p), VsStatus::Ok);
        assert!(p.is_finite() && p > 0.0);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("c.ply").to_str().unwrap()).unwrap();
        assert_eq!(vs_cloud_export_ply(cloud, path.as_ptr()), VsStatus::Ok);
        assert!(dir.path().join("c.ply").exists());

        let bad = [99usize];
        let mut c2 = ptr::null_mut();
        assert_eq!(vs_reconstruct(model, views, bad.as_ptr(), 1, &mut c2), VsStatus::InvalidArgument);
        assert!(c2.is_null());
        assert!(last_error().contains("out of range"));
        assert_eq!(vs_reconstruct(model, views, idx.as_ptr(), 0, &mut c2), VsStatus::InvalidArgument);

        vs_cloud_free(cloud);
        vs_views_free(views);
        vs_model_free(model);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(vs_model_new(0, ptr::null_mut()), VsStatus::NullPointer);
        let missing = CString::new("/nonexistent/ckpt.flxr").unwrap();
        assert_eq!(vs_model_load(missing.as_ptr(), &mut model), VsStatus::Io);
        assert!(!last_error().is_empty());
        assert_eq!(vs_model_load(ptr::null(), &mut model), VsStatus::NullPointer);

        let mut views = ptr::null_mut();
        let kind = CString::new("teapot").unwrap();
        let scheme = CString::new("solid").unwrap();
        assert_eq!(vs_views_generate(kind.as_ptr(), scheme.as_ptr(), 10, 0, &mut views), VsStatus::InvalidArgument);
        assert_eq!(vs_views_count(ptr::null()), 0);
        vs_model_free(ptr::null_mut());
        vs_views_free(ptr::null_mut());
        vs_cloud_free(ptr::null_mut());
    }
}

#[test]
fn selection_rule_over_the_boundary() {
    let counts = [0usize, 100, 90, 80, 10];
    let q = [0usize];
    let mut sel = [9u8; 5];
    let mut t = 0.0;
    let s = unsafe { vs_select_by_counts(counts.as_ptr(), 5, q.as_ptr(), 1, sel.as_mut_ptr(), &mut t) };
    assert_eq!(s, VsStatus::Ok);
    assert_eq!(sel, [1, 1, 1, 1, 0]);
    assert!((t - 48.786796564403573).abs() < 1e-12);
    let bad = [7usize];
    let s = unsafe { vs_select_by_counts(counts.as_ptr(), 5, bad.as_ptr(), 1, sel.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, VsStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/viewsplat.h")).unwrap();
    for f in [
        "vs_last_error", "vs_model_new", "vs_model_load", "vs_model_free", "vs_views_load", "vs_views_generate",
        "vs_views_count", "vs_views_free", "vs_reconstruct", "vs_cloud_count", "vs_cloud_get",
        "vs_cloud_export_ply", "vs_render", "vs_view_psnr", "vs_cloud_free", "vs_select_by_counts",
    ] {
        assert!(header.contains(&format!(" {f}(")), "{f}");
    }
    assert!(header.contains("typedef struct VsModel VsModel;"));
    assert!(header.contains("VS_STATUS_OK = 0"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/viewsplat.h"))
        .output()
    else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
