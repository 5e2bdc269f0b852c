//! Preset files shipped in `presets/` and lookup by name or path.

use std::path::Path;

use forcegain_core::envsim::Preset;

use crate::{Failure, Result};

/// The shipped preset files, embedded at build time.
pub const FILES: [(&str, &str); 9] = [
    ("train_nominal", include_str!("../presets/train_nominal.toml")),
    ("curriculum_050", include_str!("../presets/curriculum_050.toml")),
    ("clearance_005", include_str!("../presets/clearance_005.toml")),
    ("clearance_002", include_str!("../presets/clearance_002.toml")),
    ("negative_005", include_str!("../presets/negative_005.toml")),
    ("shifted_friction", include_str!("../presets/shifted_friction.toml")),
    ("shifted_scale_low", include_str!("../presets/shifted_scale_low.toml")),
    ("shifted_scale_high", include_str!("../presets/shifted_scale_high.toml")),
    ("shifted_stiffness", include_str!("../presets/shifted_stiffness.toml")),
];

pub fn parse(text: &str) -> Result<Preset> {
    let preset: Preset = toml::from_str(text).map_err(|e| Failure::usage(format!("invalid preset: {e}")))?;
    preset.validate()?;
    Ok(preset)
}

/// A shipped preset by name, or a preset TOML file when `spec` names one.
pub fn resolve(spec: &str) -> Result<Preset> {
    if let Some((_, text)) = FILES.iter().find(|(name, _)| *name == spec) {
        return parse(text);
    }
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "toml") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read preset {}: {e}", path.display())))?;
        return parse(&text);
    }
    let names: Vec<&str> = FILES.iter().map(|(n, _)| *n).collect();
    Err(Failure::usage(format!("unknown preset `{spec}` (known: {})", names.join(", "))))
}
