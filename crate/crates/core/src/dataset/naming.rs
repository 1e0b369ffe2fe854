use thiserror::Error;

use super::category::RockCategory;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NameError {
    #[error("malformed image name {0:?}: expected CCC_NNNNN.jpg")]
    Malformed(String),
    #[error("unknown category code {0} (valid codes are 101-114)")]
    UnknownCode(u32),
    #[error("index {index} is outside the range of code {code}{}", owner_hint(*.owner))]
    IndexOutOfRange {
        code: u32,
        index: u32,
        owner: Option<RockCategory>,
    },
}

fn owner_hint(owner: Option<RockCategory>) -> String {
    match owner {
        Some(cat) => format!("; it belongs to code {}", cat.code()),
        None => String::new(),
    }
}

/// Parses a basename such as `101_00001.jpg` into its category and global index.
pub fn parse_image_name(filename: &str) -> Result<(RockCategory, u32), NameError> {
    let malformed = || NameError::Malformed(filename.to_string());
    let stem = filename.strip_suffix(".jpg").ok_or_else(malformed)?;
    let (code, index) = stem.split_once('_').ok_or_else(malformed)?;
    let all_digits = |s: &str, len: usize| s.len() == len && s.bytes().all(|b| b.is_ascii_digit());
    if !all_digits(code, 3) || !all_digits(index, 5) {
        return Err(malformed());
    }
    let code: u32 = code.parse().map_err(|_| malformed())?;
    let index: u32 = index.parse().map_err(|_| malformed())?;
    let category = RockCategory::from_code(code).ok_or(NameError::UnknownCode(code))?;
    check_range(category, index)?;
    Ok((category, index))
}

/// Formats `(category, index)` as the zero-padded `CCC_NNNNN.jpg` name.
pub fn format_image_name(category: RockCategory, index: u32) -> Result<String, NameError> {
    check_range(category, index)?;
    Ok(format!("{}_{:05}.jpg", category.code(), index))
}

fn check_range(category: RockCategory, index: u32) -> Result<(), NameError> {
    if category.index_range().contains(&index) {
        Ok(())
    } else {
        Err(NameError::IndexOutOfRange {
            code: category.code(),
            index,
            owner: RockCategory::owning_index(index),
        })
    }
}

/// Every valid image name of the reference corpus, in index order.
pub fn corpus_names() -> impl Iterator<Item = String> {
    RockCategory::ALL.into_iter().flat_map(|cat| {
        cat.index_range()
            .map(move |i| format!("{}_{:05}.jpg", cat.code(), i))
    })
}
