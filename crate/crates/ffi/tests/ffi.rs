use std::ffi::{CStr, CString};
use std::ptr;

use gito::data::Sample;
use gito::graph::{GraphStrategy, PointCloud};
use gito::model::{Gito, ModelConfig};
use gito::Precision;
use gito_ffi::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        n_heads: 2,
        mlp_hidden: 8,
        query_graph: GraphStrategy::Knn(2),
        input_graph: GraphStrategy::Knn(2),
        precision: Precision::F64,
        ..ModelConfig::desk()
    }
}

fn grid(n: usize) -> Vec<f64> {
    (0..n).flat_map(|i| [(i % 4) as f64 / 4.0, (i / 4) as f64 / 4.0 + 0.01 * i as f64]).collect()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(gito_last_error()) }.to_str().unwrap().to_string()
}

#[test]
fn predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = Gito::<f64>::new(tiny(), 3).unwrap();
    // Non-zero decoder so the comparison is not trivially zero.
    for t in model.params.tensors_mut() {
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x += 0.01 * ((i % 7) as f64 - 3.0);
        }
    }
    model.save(&path).unwrap();

    let (coords, values, queries) = (grid(12), (0..12).map(|i| i as f64 * 0.1).collect::<Vec<_>>(), grid(5));
    let expected = model
        .predict(
            &Sample::new(
                vec![PointCloud::with_values(2, coords.clone(), 1, values.clone()).unwrap()],
                PointCloud::new(2, queries.clone()).unwrap(),
                vec![0.0; 5],
                1,
            )
            .unwrap(),
        )
        .unwrap();

    unsafe {
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(gito_model_load(cpath.as_ptr(), &mut m), GitoStatus::Ok);
        let mut n = 0;
        assert_eq!(gito_model_param_count(m, &mut n), GitoStatus::Ok);
        assert_eq!(n, model.param_count());
        assert_eq!(gito_model_out_channels(m, &mut n), GitoStatus::Ok);
        assert_eq!(n, 1);

        let mut s = ptr::null_mut();
        assert_eq!(gito_sample_new(2, &mut s), GitoStatus::Ok);
        assert_eq!(gito_sample_add_input(s, coords.as_ptr(), 12, values.as_ptr(), 1), GitoStatus::Ok);

        let mut out = [0.0; 5];
        let mut written = 0;
        assert_eq!(gito_model_predict(m, s, out.as_mut_ptr(), 5, &mut written), GitoStatus::Invalid);
        assert!(last_error().contains("query"));

        assert_eq!(gito_sample_set_queries(s, queries.as_ptr(), 5), GitoStatus::Ok);
        assert_eq!(gito_model_predict(m, s, out.as_mut_ptr(), 4, &mut written), GitoStatus::Shape);
        assert_eq!(gito_model_predict(m, s, out.as_mut_ptr(), 5, &mut written), GitoStatus::Ok);
        assert_eq!(written, 5);
        assert_eq!(out.to_vec(), expected);

        gito_sample_free(s);
        gito_model_free(m);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(gito_model_load(ptr::null(), &mut m), GitoStatus::Null);
        let missing = CString::new("/nonexistent/m.ckpt").unwrap();
        assert_eq!(gito_model_load(missing.as_ptr(), &mut m), GitoStatus::Io);
        assert!(last_error().starts_with("io:"));
        assert!(m.is_null());
        assert_eq!(gito_model_param_count(ptr::null(), &mut 0), GitoStatus::Null);

        let mut s = ptr::null_mut();
        assert_eq!(gito_sample_new(0, &mut s), GitoStatus::Invalid);
        assert_eq!(gito_sample_new(2, &mut s), GitoStatus::Ok);
        assert_eq!(gito_sample_add_input(s, ptr::null(), 3, ptr::null(), 1), GitoStatus::Null);
        gito_sample_free(s);
        gito_model_free(ptr::null_mut());
        gito_sample_free(ptr::null_mut());
    }
}

#[test]
fn relative_l2_fixtures() {
    let t = [1.0, 2.0, -3.0, 4.0];
    let zeros = [0.0; 4];
    let doubled = t.map(|x| 2.0 * x);
    let mut mean = f64::NAN;
    let mut per = [0.0; 2];
    unsafe {
        assert_eq!(gito_relative_l2(t.as_ptr(), t.as_ptr(), 4, 1, ptr::null_mut(), &mut mean), GitoStatus::Ok);
        assert_eq!(mean, 0.0);
        assert_eq!(gito_relative_l2(zeros.as_ptr(), t.as_ptr(), 4, 2, per.as_mut_ptr(), &mut mean), GitoStatus::Ok);
        assert_eq!((per, mean), ([1.0, 1.0], 1.0));
        assert_eq!(gito_relative_l2(doubled.as_ptr(), t.as_ptr(), 4, 1, ptr::null_mut(), &mut mean), GitoStatus::Ok);
        assert!((mean - 1.0).abs() < 1e-15);
        assert_eq!(gito_relative_l2(t.as_ptr(), zeros.as_ptr(), 4, 1, ptr::null_mut(), &mut mean), GitoStatus::Invalid);
        assert_eq!(gito_relative_l2(t.as_ptr(), t.as_ptr(), 4, 3, ptr::null_mut(), &mut mean), GitoStatus::Shape);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/gito.h")).unwrap();
    for name in [
        "gito_model_load",
        "gito_model_free",
        "gito_model_param_count",
        "gito_model_predict",
        "gito_sample_new",
        "gito_sample_add_input",
        "gito_sample_set_queries",
        "gito_sample_free",
        "gito_relative_l2",
        "gito_last_error",
        "GITO_STATUS_OK = 0",
        "GITO_STATUS_PANIC = 5",
        "typedef struct GitoModel GitoModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    // The header is valid C when a compiler is available.
    if let Ok(o) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut c| {
            use std::io::Write;
            writeln!(c.stdin.take().unwrap(), "{header}\nint main(void) {{ return 0; }}")?;
            c.wait_with_output()
        })
    {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
}
