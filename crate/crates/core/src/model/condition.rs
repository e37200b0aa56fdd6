use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{N_OCTAVES, N_SEMITONES};

/// Note target plus style mixture fed to the FiLM generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteCondition {
    pub semitone: u8,
    pub octave: u8,
    /// One weight in [0, 1] per style; a strict one-hot during training.
    pub style_mix: Vec<f64>,
}

impl NoteCondition {
    pub fn new(semitone: u8, octave: u8, style_mix: Vec<f64>) -> Result<Self> {
        let c = Self { semitone, octave, style_mix };
        c.validate(c.style_mix.len())?;
        Ok(c)
    }

    pub fn one_hot(semitone: u8, octave: u8, style: usize, n_style: usize) -> Result<Self> {
        if style >= n_style {
            return Err(Error::invalid(format!("style {style} out of range for {n_style} styles")));
        }
        let mut mix = vec![0.0; n_style];
        mix[style] = 1.0;
        Self::new(semitone, octave, mix)
    }

    pub fn validate(&self, n_style: usize) -> Result<()> {
        if self.semitone as usize >= N_SEMITONES {
            return Err(Error::invalid(format!("semitone {} out of range", self.semitone)));
        }
        if self.octave as usize >= N_OCTAVES {
            return Err(Error::invalid(format!("octave {} out of range", self.octave)));
        }
        if self.style_mix.len() != n_style {
            return Err(Error::invalid(format!(
                "style_mix has {} entries, model has {n_style} styles",
                self.style_mix.len()
            )));
        }
        if let Some(v) = self.style_mix.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("style weight {v} outside [0,1]")));
        }
        Ok(())
    }
}

/// Which condition groups reach the FiLM generator; masked groups are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    pub note: bool,
    pub style: bool,
}

impl Conditioning {
    pub const ALL: Self = Self { note: true, style: true };

    /// Flattened, masked condition vector of length 12 + 9 + n_style.
    pub fn encode(&self, c: &NoteCondition, n_style: usize) -> Result<Vec<f64>> {
        c.validate(n_style)?;
        let mut v = vec![0.0; N_SEMITONES + N_OCTAVES + n_style];
        if self.note {
            v[c.semitone as usize] = 1.0;
            v[N_SEMITONES + c.octave as usize] = 1.0;
        }
        if self.style {
            v[N_SEMITONES + N_OCTAVES..].copy_from_slice(&c.style_mix);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_layout_and_masks() {
        let c = NoteCondition::one_hot(9, 4, 1, 3).unwrap();
        let v = Conditioning::ALL.encode(&c, 3).unwrap();
        assert_eq!(v.len(), 24);
        assert_eq!(v[9], 1.0);
        assert_eq!(v[12 + 4], 1.0);
        assert_eq!(v[21 + 1], 1.0);
        assert_eq!(v.iter().sum::<f64>(), 3.0);
        let note_only = Conditioning { note: true, style: false }.encode(&c, 3).unwrap();
        assert_eq!(note_only.iter().sum::<f64>(), 2.0);
        let none = Conditioning { note: false, style: false }.encode(&c, 3).unwrap();
        assert!(none.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn rejects_bad_conditions() {
        assert!(NoteCondition::new(12, 4, vec![1.0, 0.0]).is_err());
        assert!(NoteCondition::new(0, 9, vec![1.0, 0.0]).is_err());
        assert!(NoteCondition::new(0, 4, vec![1.5, 0.0]).is_err());
        let c = NoteCondition::new(0, 4, vec![0.5, 0.5]).unwrap();
        assert!(Conditioning::ALL.encode(&c, 3).is_err());
    }
}
