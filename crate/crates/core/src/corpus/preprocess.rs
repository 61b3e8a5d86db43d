use std::sync::LazyLock;

use regex::Regex;

static EMAIL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)+").unwrap()
});
static URL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(?:https?://|www\.)\S+").unwrap());

pub const URL_TOKEN: &str = "url_id";
pub const EMAIL_TOKEN: &str = "email_id";

/// Normalizes raw message text: drops control and replacement characters,
/// masks URLs and email addresses, lowercases, and collapses whitespace.
/// Idempotent.
pub fn preprocess(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_control() || c == '\u{FFFD}' {
                ' '
            } else {
                c
            }
        })
        .collect();
    let masked = EMAIL.replace_all(&cleaned, format!(" {EMAIL_TOKEN} ").as_str());
    let masked = URL.replace_all(&masked, format!(" {URL_TOKEN} ").as_str());
    let lower = masked.to_lowercase();
    lower.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rules() {
        assert_eq!(
            preprocess("Visit https://x.example NOW"),
            "visit url_id now"
        );
        assert_eq!(preprocess("mail a@b.co"), "mail email_id");
        assert_eq!(
            preprocess("see www.shop.example/a?b=1, thanks"),
            "see url_id thanks"
        );
        assert_eq!(preprocess("tab\there\u{7}bell\r\nnew"), "tab here bell new");
        assert_eq!(preprocess(""), "");
    }

    proptest! {
        #[test]
        fn idempotent(s in "\\PC{0,60}|[a-zA-Z@./: \t\n]{0,60}") {
            let once = preprocess(&s);
            prop_assert_eq!(preprocess(&once), once);
        }
    }
}
