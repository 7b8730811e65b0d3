use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::augment::Palette;
use crate::error::{Error, Result};

/// Maximum number of attributes an [`AttributeSet`] can hold.
pub const MAX_ATTRIBUTES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attribute {
    pub name: String,
    /// Caption phrase, e.g. `"long sleeves"`. Its first word is the attribute's key token.
    pub phrase: String,
}

/// Ordered attribute list; the index of a name is its bit position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeVocabulary {
    attributes: Vec<Attribute>,
}

impl TryFrom<Vec<Attribute>> for AttributeVocabulary {
    type Error = Error;
    fn try_from(v: Vec<Attribute>) -> Result<Self> {
        AttributeVocabulary::new(v)
    }
}

impl From<AttributeVocabulary> for Vec<Attribute> {
    fn from(v: AttributeVocabulary) -> Self {
        v.attributes
    }
}

impl Default for AttributeVocabulary {
    fn default() -> Self {
        let raw = [
            ("glasses", "glasses"),
            ("long-sleeves", "long sleeves"),
            ("short-sleeves", "short sleeves"),
            ("hat", "hat"),
            ("backpack", "backpack"),
            ("skirt", "skirt"),
            ("trousers", "trousers"),
            ("coat", "coat"),
            ("mask", "mask"),
            ("handbag", "handbag"),
            ("boots", "boots"),
            ("umbrella", "umbrella"),
        ];
        AttributeVocabulary {
            attributes: raw
                .iter()
                .map(|(n, p)| Attribute {
                    name: (*n).into(),
                    phrase: (*p).into(),
                })
                .collect(),
        }
    }
}

impl AttributeVocabulary {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.len() < 2 || attributes.len() > MAX_ATTRIBUTES {
            return Err(Error::ConfigInvalid(format!(
                "attribute count must be in 2..={MAX_ATTRIBUTES}, got {}",
                attributes.len()
            )));
        }
        for (i, a) in attributes.iter().enumerate() {
            if a.phrase.split_whitespace().next().is_none() {
                return Err(Error::ConfigInvalid(format!("attribute {} has empty phrase", a.name)));
            }
            for b in &attributes[i + 1..] {
                if a.name == b.name || key_of(&a.phrase) == key_of(&b.phrase) {
                    return Err(Error::ConfigInvalid(format!(
                        "attributes {} and {} collide",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(AttributeVocabulary { attributes })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn name(&self, k: usize) -> &str {
        &self.attributes[k].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn phrase_tokens(&self, k: usize) -> impl Iterator<Item = &str> {
        self.attributes[k].phrase.split_whitespace()
    }

    /// The word masked out when attribute `k` is the reasoning target.
    pub fn key_token(&self, k: usize) -> &str {
        key_of(&self.attributes[k].phrase)
    }

    pub fn set_of(&self, names: &[&str]) -> Result<AttributeSet> {
        let mut s = AttributeSet::empty();
        for n in names {
            let k = self
                .index_of(n)
                .ok_or_else(|| Error::ConfigInvalid(format!("unknown attribute {n}")))?;
            s.insert(k);
        }
        Ok(s)
    }
}

fn key_of(phrase: &str) -> &str {
    phrase.split_whitespace().next().unwrap_or("")
}

/// Bitset over attribute indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct AttributeSet(u64);

impl AttributeSet {
    pub const fn empty() -> Self {
        AttributeSet(0)
    }

    pub const fn from_bits(bits: u64) -> Self {
        AttributeSet(bits)
    }

    pub fn from_indices(idx: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty();
        for k in idx {
            s.insert(k);
        }
        s
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    pub fn insert(&mut self, k: usize) {
        assert!(k < MAX_ATTRIBUTES);
        self.0 |= 1 << k;
    }

    pub fn contains(self, k: usize) -> bool {
        k < MAX_ATTRIBUTES && self.0 & (1 << k) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: AttributeSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..MAX_ATTRIBUTES).filter(move |&k| self.contains(k))
    }

    pub fn to_hex(self) -> String {
        format!("{:x}", self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        u64::from_str_radix(s, 16)
            .map(AttributeSet)
            .map_err(|_| Error::Malformed(format!("attribute bits {s:?}")))
    }
}

impl fmt::Display for AttributeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, k) in self.iter().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, "}}")
    }
}

/// Token used in place of a masked attribute word.
pub const MASK_TOKEN: &str = "[MASK]";
const TEMPLATE_WORDS: [&str; 4] = ["a", "man", "wearing", "and"];

/// Closed token vocabulary shared by both branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocabulary {
    /// Mask token, template words, attribute words, palette names, vehicle types.
    pub fn build(attrs: &AttributeVocabulary, palette: &Palette, vehicle_types: &[String]) -> Self {
        let mut words: Vec<String> = vec![MASK_TOKEN.to_string()];
        words.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        for k in 0..attrs.len() {
            words.extend(attrs.phrase_tokens(k).map(str::to_string));
        }
        words.extend(palette.entries().iter().map(|e| e.name.clone()));
        words.extend(vehicle_types.iter().cloned());
        Self::from_tokens(words)
    }

    /// Keeps first occurrences, in order.
    pub fn from_tokens(words: Vec<String>) -> Self {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for w in words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        TokenVocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn mask_id(&self) -> usize {
        self.id(MASK_TOKEN).expect("vocabulary always carries the mask token")
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::UnknownToken(t.as_ref().to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or("?").to_string()).collect()
    }
}

/// `"a man wearing <p1> and <p2> ..."`, phrases in vocabulary order.
pub fn caption_from_attributes(attrs: AttributeSet, vocab: &AttributeVocabulary) -> Result<Vec<String>> {
    if attrs.is_empty() {
        return Err(Error::EmptyAttributeSet);
    }
    let mut out: Vec<String> = ["a", "man", "wearing"].iter().map(|s| s.to_string()).collect();
    for (n, k) in attrs.iter().filter(|&k| k < vocab.len()).enumerate() {
        if n > 0 {
            out.push("and".into());
        }
        out.extend(vocab.phrase_tokens(k).map(str::to_string));
    }
    Ok(out)
}

/// Whitespace tokenization with lowercasing and trailing punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '[' && c != ']')
                .to_string()
        })
        .filter(|w| !w.is_empty())
        .map(|w| if w == MASK_TOKEN { w } else { w.to_lowercase() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_attribute_caption() {
        let v = AttributeVocabulary::default();
        let s = v.set_of(&["glasses"]).unwrap();
        assert_eq!(
            caption_from_attributes(s, &v).unwrap(),
            ["a", "man", "wearing", "glasses"]
        );
    }

    #[test]
    fn two_attribute_caption() {
        let v = AttributeVocabulary::default();
        let s = v.set_of(&["long-sleeves", "glasses"]).unwrap();
        assert_eq!(
            caption_from_attributes(s, &v).unwrap().join(" "),
            "a man wearing glasses and long sleeves"
        );
    }

    #[test]
    fn empty_caption_rejected() {
        let v = AttributeVocabulary::default();
        assert!(matches!(
            caption_from_attributes(AttributeSet::empty(), &v),
            Err(Error::EmptyAttributeSet)
        ));
    }

    #[test]
    fn subset_semantics() {
        let a = AttributeSet::from_indices([0, 1]);
        let b = AttributeSet::from_indices([0]);
        assert!(b.is_subset_of(a));
        assert!(!a.is_subset_of(b));
        assert!(AttributeSet::empty().is_subset_of(b));
        assert_eq!(AttributeSet::from_hex(&a.to_hex()).unwrap(), a);
        assert_eq!(a.to_hex(), "3");
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        let mut attrs = AttributeVocabulary::default().attributes().to_vec();
        attrs[1].name = attrs[0].name.clone();
        assert!(AttributeVocabulary::new(attrs).is_err());
        let one = vec![Attribute {
            name: "x".into(),
            phrase: "x".into(),
        }];
        assert!(AttributeVocabulary::new(one).is_err());
    }

    #[test]
    fn token_vocabulary_is_closed_and_stable() {
        let types = vec!["audi".to_string(), "truck".to_string()];
        let v = TokenVocabulary::build(&AttributeVocabulary::default(), &Palette::default(), &types);
        assert_eq!(v.mask_id(), 0);
        assert_eq!(v.id("a"), Some(1));
        assert!(v.id("audi").is_some() && v.id("white").is_some());
        assert!(matches!(v.encode(&["zebra"]), Err(Error::UnknownToken(_))));
        let ids = v.encode(&["a", "white", "audi"]).unwrap();
        assert_eq!(v.decode(&ids), ["a", "white", "audi"]);
    }

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(tokenize("A man wearing glasses."), ["a", "man", "wearing", "glasses"]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
    }
}
