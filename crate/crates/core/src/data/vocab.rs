use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const MASK: usize = 2;
const SPECIALS: usize = 3;
const FIRST_CHAR: u8 = b' ';
const LAST_CHAR: u8 = b'~';
const CHARS: usize = (LAST_CHAR - FIRST_CHAR) as usize + 1;

/// Shared character vocabulary: three specials, the 95 printable ASCII
/// characters, then one tag token per language.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tags: Vec<String>,
}

impl Vocab {
    pub fn new(tags: Vec<String>) -> Self {
        Self { tags }
    }

    /// Size for `langs` languages.
    pub fn size_for(langs: usize) -> usize {
        SPECIALS + CHARS + langs
    }

    pub fn size(&self) -> usize {
        Self::size_for(self.tags.len())
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        let b = u32::from(c);
        (u32::from(FIRST_CHAR)..=u32::from(LAST_CHAR))
            .contains(&b)
            .then(|| SPECIALS + (b - u32::from(FIRST_CHAR)) as usize)
    }

    pub fn tag_id(&self, lang: usize) -> usize {
        SPECIALS + CHARS + lang
    }

    pub fn lang_of_tag(&self, id: usize) -> Option<usize> {
        id.checked_sub(SPECIALS + CHARS).filter(|&l| l < self.tags.len())
    }

    pub fn is_char(&self, id: usize) -> bool {
        (SPECIALS..SPECIALS + CHARS).contains(&id)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut bad: Vec<char> = text.chars().filter(|&c| self.char_id(c).is_none()).collect();
        if !bad.is_empty() {
            bad.dedup();
            return Err(Error::Data(format!("characters not in vocabulary: {bad:?}")));
        }
        Ok(text.chars().filter_map(|c| self.char_id(c)).collect())
    }

    /// Renders character tokens; specials and tags are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| self.is_char(i))
            .map(|&i| char::from(FIRST_CHAR + (i - SPECIALS) as u8))
            .collect()
    }

    /// `[tag, chars..., eos]`
    pub fn target(&self, lang: usize, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(text.len() + 2);
        out.push(self.tag_id(lang));
        out.extend(self.tokenize(text)?);
        out.push(EOS);
        Ok(out)
    }
}
