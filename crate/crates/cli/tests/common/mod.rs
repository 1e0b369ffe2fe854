//! Procedurally generated miniature corpus: every category gets its own
//! color and stripe pattern, half the images are "cross-polarized" (darker,
//! inverted stripes) and each caption follows a per-category template.

#![allow(dead_code)]

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use petrocap_core::dataset::{
    compose_caption, format_image_name, serialize_captions, CaptionRecord, CaptionSegments, LightType, RockCategory,
};

struct Template {
    category: RockCategory,
    rock: &'static str,
    texture: &'static str,
    minerals: &'static str,
    form: &'static str,
    relief: &'static str,
    interference: &'static str,
    color: [u8; 3],
    period: u32,
}

const TEMPLATES: [Template; 14] = [
    Template {
        category: RockCategory::Andesita,
        rock: "una andesita",
        texture: "Tiene textura porfídica",
        minerals: "Los minerales principales son plagioclasa y piroxeno",
        form: "Los cristales son euhedrales",
        relief: "El relieve es moderado",
        interference: "Los colores de interferencia son de primer orden",
        color: [200, 60, 60],
        period: 6,
    },
    Template {
        category: RockCategory::Basalto,
        rock: "un basalto",
        texture: "Tiene textura intergranular",
        minerals: "Los minerales principales son plagioclasa, olivino y augita",
        form: "Los cristales son subhedrales, con un hábito prismático",
        relief: "El relieve es alto",
        interference: "Los colores de interferencia son de segundo orden",
        color: [60, 200, 60],
        period: 8,
    },
    Template {
        category: RockCategory::Riolita,
        rock: "una riolita",
        texture: "Tiene textura afanítica",
        minerals: "Los minerales principales son cuarzo y sanidina",
        form: "Los cristales son anhedrales",
        relief: "El relieve es bajo",
        interference: "Los colores de interferencia son de primer orden",
        color: [60, 60, 200],
        period: 10,
    },
    Template {
        category: RockCategory::Diorita,
        rock: "una diorita",
        texture: "Tiene textura inequigranular alotriomórfica",
        minerals: "Los minerales principales son plagioclasa y biotita",
        form: "con un hábito tabular",
        relief: "El relieve es fuerte",
        interference: "Los colores de interferencia son de primer orden",
        color: [200, 200, 60],
        period: 12,
    },
    Template {
        category: RockCategory::Gabro,
        rock: "un gabro",
        texture: "Tiene textura ofítica",
        minerals: "Los minerales principales son plagioclasa y augita",
        form: "Los cristales son subhedrales",
        relief: "El relieve es alto",
        interference: "Los colores de interferencia son de segundo orden",
        color: [200, 60, 200],
        period: 14,
    },
    Template {
        category: RockCategory::Granito,
        rock: "un granito",
        texture: "Tiene textura granular",
        minerals: "Los minerales principales son cuarzo, ortoclasa y moscovita",
        form: "Los cristales son anhedrales, con un hábito ecuante",
        relief: "El relieve es bajo",
        interference: "Los colores de interferencia son de primer orden",
        color: [60, 200, 200],
        period: 16,
    },
    Template {
        category: RockCategory::RocaUltramafica,
        rock: "una roca ultramáfica",
        texture: "Tiene textura cumulada",
        minerals: "Los minerales principales son olivino y serpentina",
        form: "Los cristales son redondeados",
        relief: "El relieve es fuerte",
        interference: "Los colores de interferencia son de tercer orden",
        color: [240, 140, 40],
        period: 6,
    },
    Template {
        category: RockCategory::Esquisto,
        rock: "un esquisto",
        texture: "Tiene textura nematoblástica",
        minerals: "Los minerales principales son glaucofana y cuarzo",
        form: "Los cristales son subhedrales, con un hábito prismático",
        relief: "El relieve es fuerte",
        interference: "Los colores de interferencia son de segundo orden",
        color: [140, 40, 240],
        period: 8,
    },
    Template {
        category: RockCategory::Filita,
        rock: "una filita",
        texture: "Tiene textura lepidoblástica",
        minerals: "Los minerales principales son sericita y clorita",
        form: "con un hábito laminar",
        relief: "El relieve es bajo",
        interference: "Los colores de interferencia son de primer orden",
        color: [40, 240, 140],
        period: 10,
    },
    Template {
        category: RockCategory::Gneis,
        rock: "un gneis",
        texture: "Tiene textura bandeada",
        minerals: "Los minerales principales son feldespato, cuarzo y hornblenda",
        form: "Los cristales son alargados",
        relief: "El relieve es moderado",
        interference: "Los colores de interferencia son de segundo orden",
        color: [240, 40, 140],
        period: 12,
    },
    Template {
        category: RockCategory::Marmol,
        rock: "un mármol",
        texture: "Tiene textura granoblástica",
        minerals: "Los minerales principales son calcita y dolomita",
        form: "Los cristales son poligonales",
        relief: "El relieve es variable",
        interference: "Los colores de interferencia son de orden alto",
        color: [140, 240, 40],
        period: 14,
    },
    Template {
        category: RockCategory::Arenisca,
        rock: "una arenisca",
        texture: "Tiene textura madura",
        minerals: "Los minerales principales son cuarzo",
        form: "Contiene clastos redondeados y de esfericidad alta",
        relief: "Se nota un relieve bajo",
        interference: "Los colores de interferencia son de primer orden",
        color: [40, 140, 240],
        period: 16,
    },
    Template {
        category: RockCategory::Caliza,
        rock: "una caliza",
        texture: "Tiene textura bioclástica",
        minerals: "Los componentes principales son fósiles y micrita",
        form: "",
        relief: "El relieve es variable",
        interference: "Los colores de interferencia son de orden alto",
        color: [120, 120, 120],
        period: 6,
    },
    Template {
        category: RockCategory::Lutita,
        rock: "una lutita",
        texture: "Tiene textura laminada",
        minerals: "Los minerales principales son arcilla y cuarzo",
        form: "",
        relief: "El relieve es bajo",
        interference: "Los colores de interferencia son de primer orden",
        color: [230, 230, 230],
        period: 8,
    },
];

fn template(category: RockCategory) -> &'static Template {
    TEMPLATES.iter().find(|t| t.category == category).expect("every category has a template")
}

/// Clause breakdown of the template caption.
pub fn segments(category: RockCategory, light: LightType) -> CaptionSegments {
    let t = template(category);
    let light_phrase = match light {
        LightType::Ppl => "en luz polarizada paralela",
        LightType::Xpl => "en luz polarizada cruzada",
    };
    let sandstone = category == RockCategory::Arenisca;
    CaptionSegments {
        rock_and_light: format!("Se trata de {} {light_phrase}", t.rock),
        texture: t.texture.into(),
        minerals: t.minerals.into(),
        form_and_habit: t.form.into(),
        sorting: if sandstone { "Un sorteo bueno".into() } else { String::new() },
        packing: if sandstone {
            "El empaquetamiento es tipo tangente".into()
        } else {
            String::new()
        },
        relief_or_interference: match light {
            LightType::Ppl => t.relief.into(),
            LightType::Xpl => t.interference.into(),
        },
    }
}

pub fn caption(category: RockCategory, light: LightType) -> String {
    compose_caption(category, &segments(category, light)).expect("templates follow the grammar")
}

/// Images 0..n/2 of a category are plane-polarized, the rest cross-polarized.
pub fn light_of(slot: u32, per_category: u32) -> LightType {
    if slot < per_category / 2 {
        LightType::Ppl
    } else {
        LightType::Xpl
    }
}

pub fn image(category: RockCategory, slot: u32, light: LightType, size: u32) -> RgbImage {
    let t = template(category);
    let mut rng = ChaCha8Rng::seed_from_u64(category.code() as u64 * 1000 + slot as u64);
    let (bright, dark) = match light {
        LightType::Ppl => (1.0, 0.55),
        LightType::Xpl => (0.35, 0.8),
    };
    let vertical = category.code() % 2 == 0;
    RgbImage::from_fn(size, size, |x, y| {
        let along = if vertical { x } else { y };
        let factor = if (along / t.period) % 2 == 0 { bright } else { dark };
        let px = t.color.map(|c| {
            let jitter: f64 = rng.gen_range(-6.0..6.0);
            (c as f64 * factor + jitter).clamp(0.0, 255.0) as u8
        });
        Rgb(px)
    })
}

pub fn jpeg_bytes(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Jpeg).expect("jpeg encodes");
    out.into_inner()
}

pub struct CorpusItem {
    pub category: RockCategory,
    pub light: LightType,
    pub filename: String,
    pub path: PathBuf,
    pub caption: String,
}

/// Writes `per_category` images per category under `root/images`, plus
/// `root/captions.txt` and `root/lights.tsv`.
pub fn write_corpus(root: &Path, per_category: u32, size: u32) -> Vec<CorpusItem> {
    let images = root.join("images");
    std::fs::create_dir_all(&images).unwrap();
    let mut items = Vec::new();
    for category in RockCategory::ALL {
        let first = *category.index_range().start();
        for slot in 0..per_category {
            let light = light_of(slot, per_category);
            let filename = format_image_name(category, first + slot).unwrap();
            let path = images.join(&filename);
            std::fs::write(&path, jpeg_bytes(&image(category, slot, light, size))).unwrap();
            items.push(CorpusItem {
                category,
                light,
                filename,
                path,
                caption: caption(category, light),
            });
        }
    }
    let records: Vec<CaptionRecord> = items
        .iter()
        .map(|i| CaptionRecord::new(CaptionRecord::primary_label(&i.filename), i.caption.clone()).unwrap())
        .collect();
    std::fs::write(root.join("captions.txt"), serialize_captions(&records)).unwrap();
    let lights: String = items.iter().map(|i| format!("{}\t{}\n", i.filename, i.light)).collect();
    std::fs::write(root.join("lights.tsv"), lights).unwrap();
    items
}
