#![allow(dead_code)]

use std::sync::OnceLock;

use roomfield_core::field::{Aabb, DensityBias, FieldConfig, RadianceField};
use roomfield_core::fit::fit_to_room;
use roomfield_core::prior::OracleRoom;
use roomfield_core::render::{Precision, RenderSettings};

pub fn room_field_config() -> FieldConfig {
    FieldConfig {
        density_bias: DensityBias::Shell { strength: 8.0 },
        ..FieldConfig::desk(Aabb::cube(2.25))
    }
}

/// Desk-sized field regressed directly onto the default room.
pub fn fitted_room_field() -> &'static RadianceField {
    static FIELD: OnceLock<RadianceField> = OnceLock::new();
    FIELD.get_or_init(|| {
        let mut field = RadianceField::initialized(room_field_config(), 11).unwrap();
        fit_to_room(&mut field, &OracleRoom::default(), 1500, 256, 5);
        field
    })
}

pub fn room_render_settings() -> RenderSettings {
    RenderSettings::new(64, 0.05, 4.0 * 3f64.sqrt())
        .unwrap()
        .with_precision(Precision::Single)
}
