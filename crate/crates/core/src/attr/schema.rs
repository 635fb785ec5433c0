use crate::error::{Error, Result};

/// One attribute dimension and its admissible values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttrKey {
    pub name: String,
    pub values: Vec<String>,
}

/// Attribute keys with value vocabularies. The first key is the category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    keys: Vec<AttrKey>,
}

const DEFAULT: &str = "\
Category: Sweater, Dress, Jacket, Tumbler, Sneaker, Handbag, Lamp, Backpack
Color: Red, Blue, Green, Black, White, Beige, Brown, Pink, Grey, Yellow, Navy, Purple
Material: Wool, Cotton, Leather, Steel, Canvas, Silk, Denim, Ceramic, Nylon, Linen
Style: Casual, Formal, Vintage, Sporty, Minimalist, Bohemian, Classic, Streetwear
DesignElements: Floral, Stripe, Plaid, DogMotif, Logo, Polka, Geometric, Embroidery, Solid, Camouflage
";

fn valid_token(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Schema {
    pub fn new(keys: Vec<AttrKey>) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::InvalidArgument("schema has no keys".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for k in &keys {
            if k.values.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "key `{}` has no values",
                    k.name
                )));
            }
            for t in std::iter::once(&k.name).chain(&k.values) {
                if !valid_token(t) {
                    return Err(Error::InvalidArgument(format!(
                        "`{t}` is not a valid token"
                    )));
                }
                if !seen.insert(t.clone()) {
                    return Err(Error::InvalidArgument(format!("token `{t}` appears twice")));
                }
            }
        }
        Ok(Self { keys })
    }

    /// Five keys with 8–12 values each.
    pub fn default_schema() -> Self {
        Self::parse(DEFAULT).expect("built-in schema is valid")
    }

    /// Parses `Key: v1, v2, ...` lines; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut keys = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, vals) = line.split_once(':').ok_or_else(|| {
                Error::InvalidArgument(format!("schema line {}: missing `:`", n + 1))
            })?;
            let values = vals
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            keys.push(AttrKey {
                name: name.trim().to_string(),
                values,
            });
        }
        Self::new(keys)
    }

    pub fn to_text(&self) -> String {
        self.keys
            .iter()
            .map(|k| format!("{}: {}\n", k.name, k.values.join(", ")))
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &AttrKey> {
        self.keys.iter()
    }

    pub fn key(&self, i: usize) -> &AttrKey {
        &self.keys[i]
    }

    pub fn num_keys(&self) -> usize {
        self.keys.len()
    }

    pub fn key_index(&self, name: &str) -> Option<usize> {
        self.keys.iter().position(|k| k.name == name)
    }

    pub fn category_key(&self) -> &AttrKey {
        &self.keys[0]
    }

    pub fn total_values(&self) -> usize {
        self.keys.iter().map(|k| k.values.len()).sum()
    }
}
