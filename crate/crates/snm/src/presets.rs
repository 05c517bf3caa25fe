//! Template files bundled with the binary.

pub const PRESETS: [(&str, &str); 3] = [
    ("snm5", include_str!("../presets/snm5.txt")),
    ("snm5-skip", include_str!("../presets/snm5-skip.txt")),
    ("snm10-skip", include_str!("../presets/snm10-skip.txt")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}
