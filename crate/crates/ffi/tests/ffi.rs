use std::ffi::{CStr, CString};
use std::ptr;

use koalanet::degrade::{self, DegradationSpec};
use koalanet::down::DownsamplerConfig;
use koalanet::infer::Model;
use koalanet::synth::synth_image;
use koalanet::train::{Checkpoint, Stage};
use koalanet::up::{self, UpsamplerConfig};
use koalanet::{down, io};
use koalanet_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(koala_last_error()) }.to_string_lossy().into_owned()
}

fn toy_checkpoint(path: &std::path::Path) {
    let dcfg = DownsamplerConfig { channels: 8, levels: 2, resblocks: 1 };
    let ucfg = UpsamplerConfig { channels: 8, scale: 2, koala_blocks: 1, res_blocks: 1, koala: true };
    let mut weights = down::build_downsampler(&dcfg, 1).unwrap();
    let mut up_w = up::build_upsampler(&ucfg, 2).unwrap();
    up::randomize_koala_heads(&mut up_w, &ucfg, 3, 0.5);
    weights.merge(up_w);
    let ckpt = Checkpoint {
        stage: Stage::Joint,
        iteration: 0,
        total_iters: 0,
        seed: 0,
        weights,
        adam: Default::default(),
    };
    ckpt.save(path).unwrap();
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(koala_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/koalanet.h")).unwrap();
    for name in [
        "koala_model_load",
        "koala_model_free",
        "koala_model_super_resolve",
        "koala_model_estimate_kernel",
        "koala_degradation_kernel",
        "koala_degrade",
        "koala_last_error",
        "KOALA_STATUS_NULL_POINTER",
        "typedef struct KoalaModel KoalaModel",
        "KOALA_KERNEL_TAPS 400",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn null_and_invalid_arguments_are_reported() {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { koala_model_load(ptr::null(), &mut model) }, KoalaStatus::NullPointer);
    assert!(last_error().contains("path"));

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { koala_model_load(missing.as_ptr(), &mut model) }, KoalaStatus::Io);
    assert!(model.is_null());
    assert!(!last_error().is_empty());

    let mut k = [0.0f64; 400];
    assert_eq!(unsafe { koala_degradation_kernel(1.0, 1.0, 0.0, 3, k.as_mut_ptr()) }, KoalaStatus::Invalid);
    assert_eq!(unsafe { koala_degradation_kernel(9.0, 1.0, 0.0, 2, k.as_mut_ptr()) }, KoalaStatus::Invalid);
    assert_eq!(unsafe { koala_degradation_kernel(1.0, 1.0, 0.0, 2, ptr::null_mut()) }, KoalaStatus::NullPointer);
    assert_eq!(unsafe { koala_degradation_kernel(1.0, 1.0, 0.0, 2, k.as_mut_ptr()) }, KoalaStatus::Ok);
    assert_eq!(last_error(), "");

    assert_eq!(unsafe { koala_model_scale(ptr::null()) }, 0);
    assert!(!unsafe { koala_model_is_koala(ptr::null()) });
    unsafe { koala_model_free(ptr::null_mut()) };

    let mut out = [0u8; 12];
    let rgb = [0u8; 48];
    let status = unsafe { koala_degrade(rgb.as_ptr(), 4, 4, k.as_ptr(), 2, out.as_mut_ptr(), 11) };
    assert_eq!(status, KoalaStatus::Invalid);
    let status = unsafe { koala_degrade(rgb.as_ptr(), 5, 4, k.as_ptr(), 2, out.as_mut_ptr(), 12) };
    assert_eq!(status, KoalaStatus::Invalid);
}

#[test]
fn degrade_matches_the_library() {
    let hr = synth_image(4, 40, 32);
    let spec = DegradationSpec::new(2.0, 0.7, 1.1, 0).unwrap();
    let mut k = [0.0f64; 400];
    assert_eq!(unsafe { koala_degradation_kernel(2.0, 0.7, 1.1, 4, k.as_mut_ptr()) }, KoalaStatus::Ok);
    let kd = degrade::degradation_kernel(&spec, 4).unwrap();
    assert_eq!(&k[..], kd.values());

    let mut out = vec![0u8; 10 * 8 * 3];
    let status = unsafe { koala_degrade(hr.as_raw().as_ptr(), 40, 32, k.as_ptr(), 4, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, KoalaStatus::Ok);
    let expected = degrade::degrade_image(&io::rgb_to_tensor_255::<f64>(&hr), &kd, 4, koalanet::tensor::PadMode::Replicate).unwrap();
    assert_eq!(out, io::tensor_255_to_rgb(&expected, 0).into_raw());
}

#[test]
fn model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    toy_checkpoint(&path);
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { koala_model_load(c_path.as_ptr(), &mut model) }, KoalaStatus::Ok);
    assert!(!model.is_null());
    assert_eq!(unsafe { koala_model_scale(model) }, 2);
    assert!(unsafe { koala_model_is_koala(model) });

    let lr = synth_image(8, 13, 9);
    let mut sr = vec![0u8; 26 * 18 * 3];
    let status = unsafe { koala_model_super_resolve(model, lr.as_raw().as_ptr(), 13, 9, sr.as_mut_ptr(), sr.len()) };
    assert_eq!(status, KoalaStatus::Ok, "{}", last_error());
    let reference = Model::load(&path).unwrap().run(&lr, true).unwrap();
    assert_eq!(sr, reference.sr.as_raw().to_vec());

    let short = unsafe { koala_model_super_resolve(model, lr.as_raw().as_ptr(), 13, 9, sr.as_mut_ptr(), 10) };
    assert_eq!(short, KoalaStatus::Invalid);

    let mut k = [0.0f64; 400];
    let status = unsafe { koala_model_estimate_kernel(model, lr.as_raw().as_ptr(), 13, 9, k.as_mut_ptr()) };
    assert_eq!(status, KoalaStatus::Ok);
    let mean = koalanet::eval::mean_kernel(reference.kernels.as_ref().unwrap(), 0).unwrap();
    assert_eq!(&k[..], mean.values());
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-5);

    unsafe { koala_model_free(model) };
}
