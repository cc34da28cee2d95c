//! Procedural interior-layout corpus: scene specifications, flat-colour
//! floor-plan rasters, templated descriptions, and the palette-based
//! measurement oracle that reads furniture dimensions back out of images.
//!
//! Scenes live on an 8×8 cell grid; at the default 32-pixel raster a cell is
//! 4×4 pixels, which lines up with the codec's patch size.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::Image;
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const GRID_CELLS: usize = 8;
pub const MAX_ATTEMPTS: usize = 10_000;
pub const SCHEMA_VERSION: u32 = 1;

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:expr),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn from_name(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s)
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(SpaceType {
    LivingRoom => "living room",
    Kitchen => "kitchen",
    Bedroom => "bedroom",
    Bathroom => "bathroom",
    Study => "study",
    DiningRoom => "dining room",
    Office => "office",
    Cafe => "cafe",
    HotelRoom => "hotel room",
    Shop => "shop",
    ExhibitionHall => "exhibition hall",
    HotelLobby => "hotel lobby",
    Showroom => "showroom",
    Library => "library",
    Restaurant => "restaurant",
});

named_enum!(Style {
    Modern => "modern",
    Minimalist => "minimalist",
    Nordic => "nordic",
    Industrial => "industrial",
    Vintage => "vintage",
    Rustic => "rustic",
    Japanese => "japanese",
    Mediterranean => "mediterranean",
    Luxurious => "luxurious",
    Classic => "classic",
    Classical => "classical",
    Futuristic => "futuristic",
    EcoFriendly => "eco-friendly",
    Eclectic => "eclectic",
    Country => "country",
});

named_enum!(FurnitureKind {
    Sofa => "sofa",
    Bed => "bed",
    Table => "table",
    Chair => "chair",
    Desk => "desk",
    Wardrobe => "wardrobe",
    Bookshelf => "bookshelf",
    Cabinet => "cabinet",
    Counter => "counter",
    Bathtub => "bathtub",
    Sink => "sink",
    Armchair => "armchair",
    Nightstand => "nightstand",
    Dresser => "dresser",
    Display => "display",
    Plant => "plant",
});

impl SpaceType {
    /// Furniture typically placed in this space (besides constrained items).
    pub fn furniture(self) -> &'static [FurnitureKind] {
        use FurnitureKind::*;
        match self {
            SpaceType::LivingRoom => &[Armchair, Table, Plant],
            SpaceType::Kitchen => &[Counter, Table, Chair, Cabinet],
            SpaceType::Bedroom => &[Bed, Wardrobe, Nightstand, Dresser],
            SpaceType::Bathroom => &[Bathtub, Sink, Cabinet],
            SpaceType::Study => &[Desk, Bookshelf, Chair],
            SpaceType::DiningRoom => &[Table, Chair, Cabinet],
            SpaceType::Office => &[Desk, Chair, Bookshelf, Cabinet],
            SpaceType::Cafe => &[Counter, Table, Chair, Plant],
            SpaceType::HotelRoom => &[Bed, Nightstand, Desk, Wardrobe],
            SpaceType::Shop => &[Display, Counter, Cabinet],
            SpaceType::ExhibitionHall => &[Display, Plant, Bookshelf],
            SpaceType::HotelLobby => &[Counter, Sofa, Plant, Armchair],
            SpaceType::Showroom => &[Display, Sofa, Plant],
            SpaceType::Library => &[Bookshelf, Desk, Chair],
            SpaceType::Restaurant => &[Table, Chair, Counter],
        }
    }
}

/// Saturated fill colours, one per furniture kind.
const KIND_COLORS: [[u8; 3]; 16] = [
    [200, 30, 40],   // sofa
    [40, 60, 200],   // bed
    [230, 150, 20],  // table
    [30, 170, 60],   // chair
    [150, 40, 190],  // desk
    [20, 180, 190],  // wardrobe
    [120, 70, 20],   // bookshelf
    [250, 90, 170],  // cabinet
    [240, 230, 30],  // counter
    [90, 170, 250],  // bathtub
    [150, 230, 120], // sink
    [250, 120, 90],  // armchair
    [80, 20, 100],   // nightstand
    [20, 100, 90],   // dresser
    [190, 190, 30],  // display
    [20, 110, 20],   // plant
];

impl FurnitureKind {
    pub fn color(self) -> [f64; 3] {
        KIND_COLORS[self.index()].map(|c| c as f64 / 255.0)
    }
}

/// Named colour used in style palettes.
#[derive(Clone, Copy, Debug)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [u8; 3],
}

const fn nc(name: &'static str, r: u8, g: u8, b: u8) -> NamedColor {
    NamedColor { name, rgb: [r, g, b] }
}

/// Palette per style: `[floor, wall, trim]`. Floors are light or muted so
/// furniture colours stay well separated.
const STYLE_PALETTES: [[NamedColor; 3]; 15] = [
    [nc("white", 236, 236, 236), nc("gray", 128, 128, 128), nc("black", 20, 20, 20)],
    [nc("ivory", 250, 248, 236), nc("silver", 190, 190, 196), nc("charcoal", 50, 50, 56)],
    [nc("birch", 226, 214, 190), nc("slate", 100, 110, 120), nc("navy", 24, 36, 72)],
    [nc("concrete", 160, 160, 150), nc("rust", 150, 80, 50), nc("graphite", 40, 40, 40)],
    [nc("cream", 240, 226, 190), nc("sepia", 170, 130, 90), nc("brown", 90, 60, 30)],
    [nc("oak", 200, 170, 120), nc("moss", 110, 120, 70), nc("walnut", 70, 45, 25)],
    [nc("tatami", 214, 206, 160), nc("ash", 170, 160, 140), nc("ink", 30, 30, 40)],
    [nc("sand", 236, 214, 170), nc("terracotta", 190, 100, 70), nc("cobalt", 30, 60, 140)],
    [nc("marble", 242, 240, 234), nc("gold", 200, 160, 60), nc("onyx", 15, 15, 20)],
    [nc("beige", 226, 212, 180), nc("taupe", 150, 130, 110), nc("espresso", 60, 40, 30)],
    [nc("pearl", 234, 230, 220), nc("burgundy", 120, 30, 50), nc("mahogany", 80, 30, 20)],
    [nc("chrome", 210, 220, 230), nc("cyan", 60, 200, 230), nc("midnight", 20, 20, 50)],
    [nc("bamboo", 220, 210, 150), nc("sage", 150, 170, 130), nc("forest", 30, 70, 40)],
    [nc("linen", 240, 232, 215), nc("teal", 40, 130, 130), nc("plum", 90, 40, 80)],
    [nc("wheat", 230, 210, 160), nc("olive", 120, 120, 60), nc("pine", 40, 60, 40)],
];

impl Style {
    pub fn palette(self) -> [NamedColor; 3] {
        STYLE_PALETTES[self.index()]
    }
}

/// Every colour the rasterizer can emit, tagged by meaning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaletteEntry {
    Style(Style, usize),
    Kind(FurnitureKind),
}

pub fn global_palette() -> Vec<(PaletteEntry, [f64; 3])> {
    let mut out = Vec::new();
    for &s in Style::ALL {
        for (i, c) in s.palette().iter().enumerate() {
            out.push((PaletteEntry::Style(s, i), c.rgb.map(|v| v as f64 / 255.0)));
        }
    }
    for &k in FurnitureKind::ALL {
        out.push((PaletteEntry::Kind(k), k.color()));
    }
    out
}

/// Smallest Euclidean RGB distance between a furniture colour and any other
/// palette colour (the margin the measurement oracle relies on).
pub fn min_kind_separation() -> f64 {
    let pal = global_palette();
    let mut best = f64::INFINITY;
    for (i, (ea, ca)) in pal.iter().enumerate() {
        for (eb, cb) in &pal[i + 1..] {
            if matches!(ea, PaletteEntry::Kind(_)) || matches!(eb, PaletteEntry::Kind(_)) {
                best = best.min(dist(ca, cb));
            }
        }
    }
    best
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Furniture {
    pub kind: FurnitureKind,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    /// Index into the global palette (style colours first, then kinds).
    pub color_index: usize,
}

impl Furniture {
    fn overlaps(&self, o: &Furniture) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub space_type: SpaceType,
    pub style: Style,
    pub palette: [[u8; 3]; 3],
    pub furniture: Vec<Furniture>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for f in &self.furniture {
            if f.w == 0 || f.h == 0 || f.x + f.w > GRID_CELLS || f.y + f.h > GRID_CELLS {
                return Err(Error::Input(format!("furniture {f:?} out of bounds")));
            }
        }
        for (i, a) in self.furniture.iter().enumerate() {
            if self.furniture[i + 1..].iter().any(|b| a.overlaps(b)) {
                return Err(Error::Input("furniture rectangles overlap".into()));
            }
        }
        Ok(())
    }

    pub fn find(&self, kind: FurnitureKind) -> Option<&Furniture> {
        self.furniture.iter().find(|f| f.kind == kind)
    }
}

/// Requirement that the scene contain `kind` with the given dimensions
/// (`None` = any).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FurnitureConstraint {
    pub kind: FurnitureKind,
    pub width: Option<usize>,
    pub height: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConstraints {
    pub space_types: Option<Vec<SpaceType>>,
    pub styles: Option<Vec<Style>>,
    pub required: Vec<FurnitureConstraint>,
    /// Required minimum number of space-typical furniture items.
    pub min_typical: usize,
}

impl SceneConstraints {
    /// The desk training subset: 3 space types × 3 styles, always a sofa of
    /// width 2–4, plus at least one item typical of the space.
    pub fn desk_subset() -> Self {
        Self {
            space_types: Some(vec![SpaceType::Bedroom, SpaceType::LivingRoom, SpaceType::Office]),
            styles: Some(vec![Style::Modern, Style::Nordic, Style::Industrial]),
            required: vec![FurnitureConstraint {
                kind: FurnitureKind::Sofa,
                width: None,
                height: None,
            }],
            min_typical: 1,
        }
    }

    /// Widths the desk subset draws sofas from.
    pub const DESK_SOFA_WIDTHS: [usize; 3] = [2, 3, 4];
}

fn pick<T: Copy>(rng: &mut Rng, options: &[T]) -> T {
    options[rng.index(options.len())]
}

/// Draws a random valid scene honouring `constraints`, retrying placement up
/// to [`MAX_ATTEMPTS`] times.
pub fn generate_scene(rng: &mut Rng, constraints: &SceneConstraints) -> Result<SceneSpec> {
    let space_type = match &constraints.space_types {
        Some(v) if !v.is_empty() => pick(rng, v),
        _ => pick(rng, SpaceType::ALL),
    };
    let style = match &constraints.styles {
        Some(v) if !v.is_empty() => pick(rng, v),
        _ => pick(rng, Style::ALL),
    };
    let palette = style.palette().map(|c| c.rgb);
    let n_styles = Style::ALL.len() * 3;
    let desk_sofa = constraints
        .required
        .iter()
        .any(|c| c.kind == FurnitureKind::Sofa && c.width.is_none())
        && constraints.min_typical > 0;

    for _attempt in 0..MAX_ATTEMPTS {
        let mut items: Vec<(FurnitureKind, usize, usize)> = Vec::new();
        for c in &constraints.required {
            let w = c.width.unwrap_or_else(|| {
                if desk_sofa && c.kind == FurnitureKind::Sofa {
                    pick(rng, &SceneConstraints::DESK_SOFA_WIDTHS)
                } else {
                    rng.range_inclusive(1, 4)
                }
            });
            let h = c.height.unwrap_or_else(|| rng.range_inclusive(1, 2));
            items.push((c.kind, w, h));
        }
        let typical = space_type.furniture();
        let budget = 4usize.saturating_sub(items.len());
        let lo = constraints.min_typical.min(budget);
        let lo = if items.is_empty() { lo.max(1) } else { lo };
        let extra = rng.range_inclusive(lo, budget.max(lo));
        for _ in 0..extra {
            let kind = pick(rng, typical);
            if items.iter().any(|(k, _, _)| *k == kind) {
                continue;
            }
            items.push((kind, rng.range_inclusive(1, 4), rng.range_inclusive(1, 3)));
        }
        if items.len() < constraints.required.len() + constraints.min_typical.min(budget) {
            continue;
        }
        if let Some(furniture) = place(rng, &items, n_styles) {
            let spec = SceneSpec {
                space_type,
                style,
                palette,
                furniture,
            };
            debug_assert!(spec.validate().is_ok());
            return Ok(spec);
        }
    }
    Err(Error::Generation(format!(
        "no valid layout after {MAX_ATTEMPTS} attempts for {constraints:?}"
    )))
}

fn place(rng: &mut Rng, items: &[(FurnitureKind, usize, usize)], n_styles: usize) -> Option<Vec<Furniture>> {
    let mut placed: Vec<Furniture> = Vec::new();
    for &(kind, w, h) in items {
        if w > GRID_CELLS || h > GRID_CELLS {
            return None;
        }
        let mut ok = false;
        for _ in 0..64 {
            let f = Furniture {
                kind,
                x: rng.range_inclusive(0, GRID_CELLS - w),
                y: rng.range_inclusive(0, GRID_CELLS - h),
                w,
                h,
                color_index: n_styles + kind.index(),
            };
            if placed.iter().all(|p| !p.overlaps(&f)) {
                placed.push(f);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

/// Flat-colour floor plan: floor in `palette[0]`, a 1-pixel wall frame in
/// `palette[1]`, each rectangle filled with its kind colour and outlined by
/// a 1-pixel `palette[2]` border inside its cells.
pub fn rasterize(spec: &SceneSpec, size: usize) -> Result<Image> {
    if size == 0 || size % GRID_CELLS != 0 {
        return Err(Error::Config(format!(
            "raster size {size} must be a positive multiple of {GRID_CELLS}"
        )));
    }
    spec.validate()?;
    let cell = size / GRID_CELLS;
    let to_f = |c: [u8; 3]| c.map(|v| v as f64 / 255.0);
    let mut img = Image::filled(size, size, to_f(spec.palette[0]));
    if cell > 1 {
        for i in 0..size {
            for (y, x) in [(0, i), (size - 1, i), (i, 0), (i, size - 1)] {
                img.set_pixel(y, x, to_f(spec.palette[1]));
            }
        }
    }
    for f in &spec.furniture {
        let (y0, y1) = (f.y * cell, (f.y + f.h) * cell);
        let (x0, x1) = (f.x * cell, (f.x + f.w) * cell);
        for y in y0..y1 {
            for x in x0..x1 {
                let border = cell > 1 && (y == y0 || y == y1 - 1 || x == x0 || x == x1 - 1);
                let c = if border {
                    to_f(spec.palette[2])
                } else {
                    f.kind.color()
                };
                img.set_pixel(y, x, c);
            }
        }
    }
    Ok(img)
}

/// Furniture footprint read back from an image, in grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measured {
    pub w: usize,
    pub h: usize,
}

/// Nearest-palette segmentation, then the bounding box of the largest
/// 4-connected component of `kind`'s colour, converted to cells. Returns
/// `None` when that component has fewer than 2 pixels.
pub fn measure_layout(img: &Image, kind: FurnitureKind) -> Option<Measured> {
    let (h, w) = (img.height(), img.width());
    if h % GRID_CELLS != 0 || w % GRID_CELLS != 0 {
        return None;
    }
    let cell = w / GRID_CELLS;
    let palette = global_palette();
    let mask: Vec<bool> = (0..h * w)
        .map(|i| {
            let px = img.pixel(i / w, i % w);
            let (entry, _) = palette
                .iter()
                .min_by(|a, b| dist(&a.1, &px).total_cmp(&dist(&b.1, &px)))
                .expect("nonempty palette");
            *entry == PaletteEntry::Kind(kind)
        })
        .collect();

    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, usize, usize, usize, usize)> = None;
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        let (mut count, mut ymin, mut ymax, mut xmin, mut xmax) = (0, h, 0, w, 0);
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            count += 1;
            ymin = ymin.min(y);
            ymax = ymax.max(y);
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        if best.is_none_or(|b| count > b.0) {
            best = Some((count, ymin, ymax, xmin, xmax));
        }
    }
    let (count, ymin, ymax, xmin, xmax) = best?;
    if count < 2 {
        return None;
    }
    // Interiors are inset by the 1-pixel border on each side.
    let inset = if cell > 1 { 2 } else { 0 };
    let to_cells = |span: usize| (((span + inset) as f64) / cell as f64).round().max(1.0) as usize;
    Some(Measured {
        w: to_cells(xmax - xmin + 1),
        h: to_cells(ymax - ymin + 1),
    })
}

/// One furniture line of a description document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FurnitureDoc {
    pub kind: FurnitureKind,
    pub width: usize,
    pub height: usize,
}

/// JSON description accompanying each floor plan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionDoc {
    pub space_type: SpaceType,
    pub style: Style,
    pub furniture: Vec<FurnitureDoc>,
    pub colors: Vec<String>,
}

impl DescriptionDoc {
    /// Prompt text for this document.
    pub fn prompt(&self, rough: bool) -> String {
        let mut s = format!("a {} {}", self.style, self.space_type);
        for (i, f) in self.furniture.iter().enumerate() {
            s.push_str(if i == 0 { " with a " } else { " and a " });
            s.push_str(f.kind.name());
            if !rough {
                s.push_str(&format!(" width {} height {}", f.width, f.height));
            }
        }
        s
    }
}

pub fn describe_scene(spec: &SceneSpec, rough: bool) -> (String, DescriptionDoc) {
    let doc = DescriptionDoc {
        space_type: spec.space_type,
        style: spec.style,
        furniture: spec
            .furniture
            .iter()
            .map(|f| FurnitureDoc {
                kind: f.kind,
                width: f.w,
                height: f.h,
            })
            .collect(),
        colors: spec.style.palette().iter().map(|c| c.name.to_string()).collect(),
    };
    (doc.prompt(rough), doc)
}

/// Dimension clause recovered from prompt text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DimensionClause {
    pub kind: FurnitureKind,
    pub width: usize,
    pub height: usize,
    /// Token positions of kind, width numeral and height numeral.
    pub positions: [usize; 3],
}

/// Finds `<kind> width <n> height <m>` clauses in a token stream.
pub fn parse_dimensions(tokens: &[String]) -> Vec<DimensionClause> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + 4 < tokens.len() {
        if let Some(kind) = FurnitureKind::from_name(&tokens[i]) {
            if tokens[i + 1] == "width" && tokens[i + 3] == "height" {
                if let (Ok(w), Ok(h)) = (tokens[i + 2].parse(), tokens[i + 4].parse()) {
                    out.push(DimensionClause {
                        kind,
                        width: w,
                        height: h,
                        positions: [i, i + 2, i + 4],
                    });
                    i += 5;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

/// One generated training triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spec: SceneSpec,
    pub doc: DescriptionDoc,
    pub prompt: String,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub split: String,
    pub constraints: SceneConstraints,
    pub rough: bool,
}

/// Generates `count` samples; sample `i` uses stream `i` of `seed`, so the
/// corpus is independent of worker scheduling.
pub fn generate_corpus(
    seed: u64,
    count: usize,
    image_size: usize,
    constraints: &SceneConstraints,
    rough: bool,
) -> Result<Vec<Sample>> {
    let root = Rng::new(seed);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.split(i as u64);
            let spec = generate_scene(&mut rng, constraints)?;
            let (prompt, doc) = describe_scene(&spec, rough);
            let image = rasterize(&spec, image_size)?;
            Ok(Sample {
                spec,
                doc,
                prompt,
                image,
            })
        })
        .collect()
}

/// Writes `dir/{split}/{i}.ppm|.json|.spec.json` and `dir/{split}/manifest.json`.
pub fn write_corpus(dir: &Path, manifest: &CorpusManifest, samples: &[Sample]) -> Result<()> {
    let split_dir = dir.join(&manifest.split);
    std::fs::create_dir_all(&split_dir)?;
    for (i, s) in samples.iter().enumerate() {
        s.image.write_ppm(&split_dir.join(format!("{i}.ppm")))?;
        std::fs::write(
            split_dir.join(format!("{i}.json")),
            serde_json::to_vec_pretty(&s.doc)?,
        )?;
        std::fs::write(
            split_dir.join(format!("{i}.spec.json")),
            serde_json::to_vec_pretty(&s.spec)?,
        )?;
    }
    std::fs::write(
        split_dir.join("manifest.json"),
        serde_json::to_vec_pretty(manifest)?,
    )?;
    Ok(())
}

pub fn read_corpus(split_dir: &Path) -> Result<(CorpusManifest, Vec<Sample>)> {
    let manifest: CorpusManifest =
        serde_json::from_slice(&std::fs::read(split_dir.join("manifest.json"))?)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let doc: DescriptionDoc =
            serde_json::from_slice(&std::fs::read(split_dir.join(format!("{i}.json")))?)?;
        let spec: SceneSpec =
            serde_json::from_slice(&std::fs::read(split_dir.join(format!("{i}.spec.json")))?)?;
        let image = Image::read_ppm(&split_dir.join(format!("{i}.ppm")))?;
        samples.push(Sample {
            prompt: doc.prompt(manifest.rough),
            spec,
            doc,
            image,
        });
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{tokenize, Vocabulary};

    #[test]
    fn enums_cover_dataset_card() {
        assert!(SpaceType::ALL.len() >= 15);
        assert!(Style::ALL.len() >= 15);
        assert_eq!(Style::from_name("eco-friendly"), Some(Style::EcoFriendly));
    }

    #[test]
    fn palette_is_well_separated() {
        assert!(min_kind_separation() > 0.1, "{}", min_kind_separation());
    }

    #[test]
    fn constraint_is_echoed() {
        let c = SceneConstraints {
            required: vec![FurnitureConstraint {
                kind: FurnitureKind::Sofa,
                width: Some(4),
                height: None,
            }],
            ..Default::default()
        };
        for seed in 0..20 {
            let s = generate_scene(&mut Rng::new(seed), &c).unwrap();
            assert_eq!(s.find(FurnitureKind::Sofa).unwrap().w, 4);
        }
    }

    #[test]
    fn unsatisfiable_constraint_errors() {
        let c = SceneConstraints {
            required: vec![FurnitureConstraint {
                kind: FurnitureKind::Bed,
                width: Some(GRID_CELLS + 1),
                height: None,
            }],
            ..Default::default()
        };
        assert!(matches!(generate_scene(&mut Rng::new(1), &c), Err(Error::Generation(_))));
    }

    #[test]
    fn ten_thousand_scenes_never_overlap() {
        let c = SceneConstraints::default();
        let mut rng = Rng::new(42);
        for _ in 0..10_000 {
            let s = generate_scene(&mut rng, &c).unwrap();
            assert!((1..=4).contains(&s.furniture.len()));
            for (i, a) in s.furniture.iter().enumerate() {
                assert!(a.x + a.w <= GRID_CELLS && a.y + a.h <= GRID_CELLS);
                for b in &s.furniture[i + 1..] {
                    let disjoint = a.x + a.w <= b.x
                        || b.x + b.w <= a.x
                        || a.y + a.h <= b.y
                        || b.y + b.h <= a.y;
                    assert!(disjoint, "{a:?} overlaps {b:?}");
                }
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let c = SceneConstraints::desk_subset();
        assert_eq!(
            generate_scene(&mut Rng::new(9), &c).unwrap(),
            generate_scene(&mut Rng::new(9), &c).unwrap()
        );
    }

    fn spec_with(furniture: Vec<Furniture>) -> SceneSpec {
        SceneSpec {
            space_type: SpaceType::Bedroom,
            style: Style::Modern,
            palette: Style::Modern.palette().map(|c| c.rgb),
            furniture,
        }
    }

    #[test]
    fn empty_scene_is_uniform_floor() {
        let img = rasterize(&spec_with(vec![]), 8).unwrap();
        let floor = Style::Modern.palette()[0].rgb.map(|v| v as f64 / 255.0);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(img.pixel(y, x), floor);
            }
        }
    }

    #[test]
    fn full_width_rectangle_matches_hand_raster() {
        let table = Furniture {
            kind: FurnitureKind::Table,
            x: 0,
            y: 2,
            w: 8,
            h: 1,
            color_index: 0,
        };
        let img = rasterize(&spec_with(vec![table]), 8).unwrap();
        let floor = Style::Modern.palette()[0].rgb.map(|v| v as f64 / 255.0);
        let fill = FurnitureKind::Table.color();
        // At one pixel per cell there is no frame or border.
        let expected: Vec<Vec<[f64; 3]>> = (0..8)
            .map(|y| vec![if y == 2 { fill } else { floor }; 8])
            .collect();
        for (y, row) in expected.iter().enumerate() {
            for (x, px) in row.iter().enumerate() {
                assert_eq!(img.pixel(y, x), *px, "({y},{x})");
            }
        }
    }

    #[test]
    fn kind_distinct_rasters_differ() {
        let mut seen = Vec::new();
        for &kind in FurnitureKind::ALL {
            let f = Furniture {
                kind,
                x: 2,
                y: 2,
                w: 2,
                h: 2,
                color_index: 0,
            };
            let img = rasterize(&spec_with(vec![f]), 32).unwrap();
            assert!(!seen.contains(&img));
            seen.push(img);
        }
    }

    #[test]
    fn describe_roundtrips_and_rough_mode_has_no_digits() {
        let c = SceneConstraints::default();
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let s = generate_scene(&mut rng, &c).unwrap();
            let (prompt, doc) = describe_scene(&s, false);
            let parsed = parse_dimensions(&tokenize(&prompt));
            assert_eq!(parsed.len(), s.furniture.len());
            for (p, f) in parsed.iter().zip(&s.furniture) {
                assert_eq!((p.kind, p.width, p.height), (f.kind, f.w, f.h));
            }
            let json = serde_json::to_string(&doc).unwrap();
            assert_eq!(serde_json::from_str::<DescriptionDoc>(&json).unwrap(), doc);
            let (rough, _) = describe_scene(&s, true);
            assert!(!rough.chars().any(|c| c.is_ascii_digit()), "{rough}");
        }
    }

    #[test]
    fn prompts_stay_inside_vocabulary() {
        let vocab = Vocabulary::builtin();
        let c = SceneConstraints::default();
        let mut rng = Rng::new(77);
        for i in 0..1000 {
            let s = generate_scene(&mut rng, &c).unwrap();
            let (prompt, _) = describe_scene(&s, i % 2 == 0);
            for tok in tokenize(&prompt) {
                assert!(vocab.id(&tok).is_some(), "{tok:?} missing from vocabulary");
            }
        }
    }

    #[test]
    fn measurement_roundtrip_is_exact() {
        let c = SceneConstraints::default();
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let s = generate_scene(&mut rng, &c).unwrap();
            let img = rasterize(&s, 32).unwrap();
            for f in &s.furniture {
                assert_eq!(measure_layout(&img, f.kind), Some(Measured { w: f.w, h: f.h }));
            }
        }
        let blank = rasterize(&spec_with(vec![]), 32).unwrap();
        assert_eq!(measure_layout(&blank, FurnitureKind::Sofa), None);
    }

    #[test]
    fn measurement_tolerates_bounded_noise() {
        let amp = 0.5 * min_kind_separation() / 3f64.sqrt() * 0.99;
        let c = SceneConstraints::desk_subset();
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let s = generate_scene(&mut rng, &c).unwrap();
            let mut img = rasterize(&s, 32).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let p = img.pixel(y, x);
                    let noisy = p.map(|v| v + amp * (2.0 * rng.uniform() - 1.0));
                    img.set_pixel(y, x, noisy);
                }
            }
            let sofa = s.find(FurnitureKind::Sofa).unwrap();
            assert_eq!(
                measure_layout(&img, FurnitureKind::Sofa),
                Some(Measured { w: sofa.w, h: sofa.h })
            );
        }
    }

    #[test]
    fn corpus_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = SceneConstraints::desk_subset();
        let samples = generate_corpus(3, 5, 32, &c, false).unwrap();
        let manifest = CorpusManifest {
            schema_version: SCHEMA_VERSION,
            seed: 3,
            count: 5,
            image_size: 32,
            split: "train".into(),
            constraints: c,
            rough: false,
        };
        write_corpus(dir.path(), &manifest, &samples).unwrap();
        let (m, back) = read_corpus(&dir.path().join("train")).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(back, samples);
    }
}
