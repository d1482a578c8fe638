//! Generator prompt and the numbered-list grammar its output must follow.

use std::sync::LazyLock;

use regex::Regex;

static ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(\d+)\.\s+(\S.*?)\s*$").expect("valid regex"));

/// User message asking the trusted generator for `n` sub-queries.
pub fn generation_prompt(query: &str, n: usize) -> String {
    format!(
        "QUESTION:\n{query}\n\n\
Rewrite the QUESTION as general, low-risk sub-queries that an external assistant can answer \
without learning the private details of the QUESTION. Do not copy the QUESTION. \
Write exactly {n} sub-queries as a numbered list, one per line, in the form `<index>. <sub-query>`."
    )
}

/// Follow-up sent once when the first completion does not parse.
pub fn reformat_request(n: usize) -> String {
    format!(
        "Your previous answer was not in the required format. \
Write exactly {n} sub-queries as a numbered list, one per line, in the form `<index>. <sub-query>`."
    )
}

/// Sub-query texts of the first block of consecutive `<i>. <text>` lines
/// numbered `1..=n`. Surrounding prose is ignored.
pub fn parse_numbered_list(completion: &str, n: usize) -> Option<Vec<String>> {
    let mut block: Vec<(usize, String)> = Vec::new();
    let compliant = |block: &[(usize, String)]| {
        block.len() == n && block.iter().enumerate().all(|(i, (idx, _))| *idx == i + 1)
    };
    for line in completion.lines() {
        match ITEM.captures(line) {
            Some(c) => {
                let idx = c[1].parse::<usize>().unwrap_or(0);
                block.push((idx, c[2].to_owned()));
            }
            None => {
                if compliant(&block) {
                    break;
                }
                block.clear();
            }
        }
    }
    compliant(&block).then(|| block.into_iter().map(|(_, t)| t).collect())
}
