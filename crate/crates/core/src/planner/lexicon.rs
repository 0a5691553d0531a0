//! Word lists used by the rule backend.

pub const VERBS: &[&str] = &[
    "turn", "convert", "transform", "change", "make", "repaint", "paint", "color", "colour", "recolor", "recolour", "add",
    "give", "put", "replace", "set", "apply", "render",
];

pub const ARTICLES: &[&str] = &["the", "a", "an"];

pub const CONNECTORS: &[&str] = &["and", "then"];

/// Colour words and the RGB they stand for.
pub const COLORS: &[(&str, [f64; 3])] = &[
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 0.8, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("orange", [1.0, 0.5, 0.0]),
    ("purple", [0.5, 0.0, 0.5]),
    ("violet", [0.56, 0.0, 1.0]),
    ("pink", [1.0, 0.75, 0.8]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("brown", [0.6, 0.3, 0.1]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
    ("gray", [0.5, 0.5, 0.5]),
    ("grey", [0.5, 0.5, 0.5]),
];

/// Modifiers dropped when they precede a colour word.
pub const COLOR_MODIFIERS: &[&str] = &["light", "dark", "bright", "pale", "deep"];

pub const MATERIALS: &[&str] = &[
    "wood", "wooden", "metal", "metallic", "glass", "plastic", "stone", "marble", "gold", "golden", "silver", "steel",
    "iron", "ceramic", "rubber", "fabric", "leather", "paper", "concrete", "copper", "bronze", "clay", "ice", "crystal",
];

/// Prepositions that introduce the recipient of an added object.
pub const ATTACH_PREPS: &[&str] = &["to", "on", "onto", "for"];

pub fn is_verb(word: &str) -> bool {
    VERBS.contains(&word)
}

pub fn color_rgb(word: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|(w, _)| *w == word).map(|(_, c)| *c)
}

/// First colour word mentioned in `text`.
pub fn find_color(text: &str) -> Option<(&'static str, [f64; 3])> {
    text.split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .find_map(|w| COLORS.iter().find(|(name, _)| *name == w).copied())
}

pub fn is_material(word: &str) -> bool {
    MATERIALS.contains(&word)
}
