//! Model configurations shipped with the crate.

use crate::config::ModelConfig;
use crate::error::Result;

pub const PRESETS: &[(&str, &str)] = &[
    ("mnist-static", include_str!("../configs/mnist-static.toml")),
    ("mnist-dynamic", include_str!("../configs/mnist-dynamic.toml")),
    ("mnist-dynamic-sign-only", include_str!("../configs/mnist-dynamic-sign-only.toml")),
    ("mnist-teacher", include_str!("../configs/mnist-teacher.toml")),
    ("cifar-static", include_str!("../configs/cifar-static.toml")),
    ("cifar-dynamic", include_str!("../configs/cifar-dynamic.toml")),
    ("cifar-dynamic-sign-only", include_str!("../configs/cifar-dynamic-sign-only.toml")),
    ("cifar-teacher", include_str!("../configs/cifar-teacher.toml")),
    ("mobilenet-reactnet-static", include_str!("../configs/mobilenet-reactnet-static.toml")),
    ("mobilenet-reactnet-dynamic", include_str!("../configs/mobilenet-reactnet-dynamic.toml")),
    ("empty", include_str!("../configs/empty.toml")),
];

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn preset(name: &str) -> Option<Result<ModelConfig>> {
    preset_text(name).map(ModelConfig::from_toml)
}
