//! Query and sentence templates.

use crate::error::{Error, Result};

fn require<'a>(what: &str, value: &'a str) -> Result<&'a str> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Err(Error::invalid(format!("{what} must not be empty")));
    }
    Ok(trimmed)
}

/// Language-model question asking for the rationales of a category. Ends with
/// the `-` list primer.
pub fn render_rationale_query(category: &str) -> Result<String> {
    let c = require("category", category)?;
    Ok(format!(
        "Q: What are useful visual features for distinguishing a {c} in a photo?\n\
         A: There are several useful visual features to tell there is a {c} in a photo:\n-"
    ))
}

/// The three image-search queries for a (category, rationale) pair, in order.
pub fn render_image_queries(category: &str, rationale: &str) -> Result<[String; 3]> {
    let c = require("category", category)?;
    let r = require("rationale", rationale)?;
    Ok([
        format!("{c} which has {r}"),
        format!("{r} of {c}"),
        format!("a photo of {c} because there is {r}"),
    ])
}

/// Without `sub`, the language-model question asking for sub-rationales of a
/// rationale; with `sub`, the image-search query for the triple.
pub fn render_subrationale_queries(category: &str, rationale: &str, sub: Option<&str>) -> Result<String> {
    let c = require("category", category)?;
    let r = require("rationale", rationale)?;
    match sub {
        None => Ok(format!(
            "Q: What are useful visual features for distinguishing a {r} of a {c} in a photo?\n\
             A: There are several useful visual features to tell there is a {r} of a {c} in a photo:"
        )),
        Some(s) => render_hierarchical_sentence(c, r, s),
    }
}

/// `"A photo of {category}, because there is {sub} {rationale}"`, used both
/// as the image query and as the sentence for hierarchical training and
/// evaluation.
pub fn render_hierarchical_sentence(category: &str, rationale: &str, sub: &str) -> Result<String> {
    let c = require("category", category)?;
    let r = require("rationale", rationale)?;
    let s = require("sub-rationale", sub)?;
    Ok(format!("A photo of {c}, because there is {s} {r}"))
}

/// Recovers `(category, rationale)` from a query produced by
/// [`render_image_queries`] or the triple query of
/// [`render_subrationale_queries`]. For the triple form the returned
/// rationale is `"{sub} {rationale}"`.
pub fn parse_image_query(query: &str) -> Option<(String, String)> {
    let split = |s: &str, sep: &str| s.split_once(sep).map(|(a, b)| (a.trim().to_string(), b.trim().to_string()));
    let pair = if let Some(rest) = query.strip_prefix("A photo of ") {
        split(rest, ", because there is ")
    } else if let Some(rest) = query.strip_prefix("a photo of ") {
        split(rest, " because there is ")
    } else if query.contains(" which has ") {
        split(query, " which has ")
    } else {
        query
            .rsplit_once(" of ")
            .map(|(r, c)| (c.trim().to_string(), r.trim().to_string()))
    };
    pair.filter(|(c, r)| !c.is_empty() && !r.is_empty())
}

/// Subject of a question produced by [`render_rationale_query`] or the
/// sub-rationale question: `"dog"` or `"four legs of a dog"`.
pub fn parse_query_subject(prompt: &str) -> Option<&str> {
    let start = prompt.find("distinguishing a ")? + "distinguishing a ".len();
    let end = prompt[start..].find(" in a photo?")? + start;
    Some(&prompt[start..end])
}
