use std::collections::HashMap;

use crate::error::{Error, Result};

/// Species are stored as atomic numbers.
pub type Species = u32;

const SYMBOLS: [&str; 86] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn",
];

/// Element symbol table. Starts with H..Rn and can be extended with extra
/// pseudo-species.
#[derive(Debug, Clone)]
pub struct SpeciesTable {
    by_symbol: HashMap<String, Species>,
    by_number: HashMap<Species, String>,
}

impl Default for SpeciesTable {
    fn default() -> Self {
        let mut table = SpeciesTable {
            by_symbol: HashMap::new(),
            by_number: HashMap::new(),
        };
        for (i, sym) in SYMBOLS.iter().enumerate() {
            table.insert(sym, i as Species + 1);
        }
        table
    }
}

impl SpeciesTable {
    pub fn insert(&mut self, symbol: &str, number: Species) {
        self.by_symbol.insert(symbol.to_string(), number);
        self.by_number.insert(number, symbol.to_string());
    }

    pub fn number(&self, symbol: &str) -> Result<Species> {
        self.by_symbol
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::UnknownSpecies(symbol.to_string()))
    }

    pub fn symbol(&self, number: Species) -> Result<&str> {
        self.by_number
            .get(&number)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownSpecies(number.to_string()))
    }
}

/// Shorthand for the built-in table.
pub fn species_of(symbol: &str) -> Result<Species> {
    SpeciesTable::default().number(symbol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups() {
        let t = SpeciesTable::default();
        assert_eq!(t.number("H").unwrap(), 1);
        assert_eq!(t.number("O").unwrap(), 8);
        assert_eq!(t.symbol(6).unwrap(), "C");
        assert!(t.number("Xx").is_err());
        let mut t = t;
        t.insert("X", 200);
        assert_eq!(t.number("X").unwrap(), 200);
    }
}
