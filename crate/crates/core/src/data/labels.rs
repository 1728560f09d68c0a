/// Aortic class names in id order: background, the aorta, then its
/// thirteen branches.
pub const AORTA_CLASSES: [&str; 15] = [
    "background",
    "Aorta",
    "IA",
    "LCC",
    "LSA",
    "CA",
    "SMA",
    "LRA",
    "RRA",
    "LCIA",
    "LEIA",
    "LIIA",
    "RCIA",
    "REIA",
    "RIIA",
];

/// Names of contiguous class ids starting at 0 (background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn aorta() -> Self {
        LabelMap {
            names: AORTA_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// `background, class_1, ..., class_{n-1}`.
    pub fn generic(num_classes: usize) -> Self {
        let names = (0..num_classes)
            .map(|i| {
                if i == 0 {
                    "background".to_string()
                } else {
                    format!("class_{i}")
                }
            })
            .collect();
        LabelMap { names }
    }

    /// The aortic map for 15 classes, generic names otherwise.
    pub fn for_classes(num_classes: usize) -> Self {
        if num_classes == AORTA_CLASSES.len() {
            Self::aorta()
        } else {
            Self::generic(num_classes)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: u16) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<u16> {
        self.names.iter().position(|n| n == name).map(|i| i as u16)
    }

    /// Foreground classes as `(id, name)`.
    pub fn foreground(&self) -> impl Iterator<Item = (u16, &str)> {
        self.names
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, n)| (i as u16, n.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aorta_map_ids_follow_table_order() {
        let m = LabelMap::aorta();
        assert_eq!(m.num_classes(), 15);
        assert_eq!(m.id("background"), Some(0));
        assert_eq!(m.id("Aorta"), Some(1));
        assert_eq!(m.id("IA"), Some(2));
        assert_eq!(m.id("SMA"), Some(6));
        assert_eq!(m.id("RIIA"), Some(14));
        let mut names: Vec<_> = AORTA_CLASSES.to_vec();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 15);
        assert_eq!(m.foreground().count(), 14);
    }
}
