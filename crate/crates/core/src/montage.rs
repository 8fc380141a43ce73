//! The fixed 20-lead 10–20 montage.
//!
//! Channel order is the on-disk column order of every recording file. Head
//! coordinates are a flat projection onto the unit disc (nose towards +y,
//! right ear towards +x); they only drive the neighbour lists used for
//! whole-channel interpolation and the plotting component.

use serde::{Deserialize, Serialize};

/// Channel names in montage order.
pub const CHANNEL_NAMES: [&str; 20] = [
    "Fp1", "Fpz", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T7", "C3", "Cz", "C4", "T8", "P7", "P3",
    "Pz", "P4", "P8", "O1", "O2",
];

/// Electrodes reported as carrying the most informative connectivity.
pub const PAPER_ELECTRODES: [&str; 8] = ["Fp1", "Fpz", "Fp2", "F7", "F3", "Fz", "T7", "P7"];

/// Two channels are neighbours when their projected distance is at most this.
pub const NEIGHBOR_RADIUS: f64 = 0.45;

const OUTER_RADIUS: f64 = 0.7;

// Outer-ring azimuths in degrees, counter-clockwise from +x.
const OUTER_RING: [(&str, f64); 11] = [
    ("Fp1", 108.0),
    ("Fpz", 90.0),
    ("Fp2", 72.0),
    ("F7", 144.0),
    ("F8", 36.0),
    ("T7", 180.0),
    ("T8", 0.0),
    ("P7", -144.0),
    ("P8", -36.0),
    ("O1", -108.0),
    ("O2", -72.0),
];

const INNER: [(&str, f64, f64); 9] = [
    ("F3", -0.28, 0.37),
    ("Fz", 0.0, 0.35),
    ("F4", 0.28, 0.37),
    ("C3", -0.35, 0.0),
    ("Cz", 0.0, 0.0),
    ("C4", 0.35, 0.0),
    ("P3", -0.28, -0.37),
    ("Pz", 0.0, -0.35),
    ("P4", 0.28, -0.37),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Left,
    Right,
    Midline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lobe {
    Prefrontal,
    Frontal,
    Temporal,
    Central,
    Parietal,
    Occipital,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    /// Projected head-plane position.
    pub position: [f64; 2],
    pub hemisphere: Hemisphere,
    pub lobe: Lobe,
}

/// Hemisphere from the name suffix: odd digit left, even digit right, `z` midline.
pub fn hemisphere_of(name: &str) -> Option<Hemisphere> {
    let last = name.chars().last()?;
    match last {
        'z' => Some(Hemisphere::Midline),
        d if d.is_ascii_digit() => {
            let v = d.to_digit(10)?;
            Some(if v % 2 == 1 { Hemisphere::Left } else { Hemisphere::Right })
        }
        _ => None,
    }
}

/// Lobe from the letter prefix.
pub fn lobe_of(name: &str) -> Option<Lobe> {
    if name.starts_with("Fp") {
        return Some(Lobe::Prefrontal);
    }
    match name.chars().next()? {
        'F' => Some(Lobe::Frontal),
        'T' => Some(Lobe::Temporal),
        'C' => Some(Lobe::Central),
        'P' => Some(Lobe::Parietal),
        'O' => Some(Lobe::Occipital),
        _ => None,
    }
}

fn position_of(name: &str) -> [f64; 2] {
    if let Some((_, deg)) = OUTER_RING.iter().find(|(n, _)| *n == name) {
        let rad = deg.to_radians();
        return [OUTER_RADIUS * rad.cos(), OUTER_RADIUS * rad.sin()];
    }
    let (_, x, y) = INNER
        .iter()
        .find(|(n, _, _)| *n == name)
        .expect("every montage channel has a position");
    [*x, *y]
}

/// The 20-lead montage with symmetric neighbour lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Montage {
    channels: Vec<Channel>,
    neighbors: Vec<Vec<usize>>,
}

impl Default for Montage {
    fn default() -> Self {
        Self::standard()
    }
}

impl Montage {
    pub fn standard() -> Self {
        let channels: Vec<Channel> = CHANNEL_NAMES
            .iter()
            .map(|&name| Channel {
                name: name.to_string(),
                position: position_of(name),
                hemisphere: hemisphere_of(name).expect("montage names carry a hemisphere suffix"),
                lobe: lobe_of(name).expect("montage names carry a lobe prefix"),
            })
            .collect();
        let neighbors = (0..channels.len())
            .map(|i| {
                (0..channels.len())
                    .filter(|&j| {
                        j != i && distance(channels[i].position, channels[j].position) <= NEIGHBOR_RADIUS
                    })
                    .collect()
            })
            .collect();
        Montage { channels, neighbors }
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    /// Indices of the channels adjacent to channel `index`.
    pub fn neighbors(&self, index: usize) -> &[usize] {
        &self.neighbors[index]
    }

    /// Resolves names to montage indices, failing on the first unknown name.
    pub fn indices_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>, String> {
        names
            .iter()
            .map(|n| self.index_of(n.as_ref()).ok_or_else(|| n.as_ref().to_string()))
            .collect()
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn names_are_the_twenty_leads_once_each() {
        let m = Montage::standard();
        assert_eq!(m.len(), 20);
        let set: HashSet<_> = m.names().into_iter().collect();
        assert_eq!(set.len(), 20);
    }

    #[test]
    fn hemisphere_and_lobe_follow_name_rules() {
        let m = Montage::standard();
        for ch in m.channels() {
            let last = ch.name.chars().last().unwrap();
            let expected = match last {
                'z' => Hemisphere::Midline,
                '1' | '3' | '7' => Hemisphere::Left,
                _ => Hemisphere::Right,
            };
            assert_eq!(ch.hemisphere, expected, "{}", ch.name);
        }
        assert_eq!(lobe_of("Fp2"), Some(Lobe::Prefrontal));
        assert_eq!(lobe_of("F7"), Some(Lobe::Frontal));
        assert_eq!(lobe_of("T8"), Some(Lobe::Temporal));
        assert_eq!(lobe_of("Cz"), Some(Lobe::Central));
        assert_eq!(lobe_of("P7"), Some(Lobe::Parietal));
        assert_eq!(lobe_of("O1"), Some(Lobe::Occipital));
        assert_eq!(hemisphere_of("T8"), Some(Hemisphere::Right));
    }

    #[test]
    fn neighbors_are_symmetric_and_nonempty() {
        let m = Montage::standard();
        for i in 0..m.len() {
            assert!(m.neighbors(i).len() >= 2, "{} is isolated", m.channels()[i].name);
            for &j in m.neighbors(i) {
                assert!(m.neighbors(j).contains(&i));
            }
        }
        assert_eq!(Montage::standard(), m);
    }

    #[test]
    fn positions_lie_inside_unit_disc() {
        for ch in Montage::standard().channels() {
            assert!(distance(ch.position, [0.0, 0.0]) < 1.0);
        }
    }
}
