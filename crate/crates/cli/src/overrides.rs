use camforge::Error;

/// Turn `--key value` / `--key=value` words into config pairs. Dashes inside
/// keys become underscores, so `--learning-rate` and `--learning_rate` agree.
pub fn parse(words: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut pairs = Vec::new();
    let mut it = words.iter();
    while let Some(word) = it.next() {
        let Some(flag) = word.strip_prefix("--") else {
            return Err(Error::Config(format!("expected --key, got {word:?}")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                (flag, v.clone())
            }
        };
        if key.is_empty() {
            return Err(Error::Config(format!("empty key in {word:?}")));
        }
        pairs.push((key.replace('-', "_"), value));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn both_spellings() {
        let p = parse(&words("--noise off --learning-rate=0.01 --ht -0")).unwrap();
        assert_eq!(
            p,
            vec![
                ("noise".to_string(), "off".to_string()),
                ("learning_rate".to_string(), "0.01".to_string()),
                ("ht".to_string(), "-0".to_string()),
            ]
        );
    }

    #[test]
    fn malformed() {
        assert!(parse(&words("noise off")).is_err());
        assert!(parse(&words("--noise")).is_err());
        assert!(parse(&words("-- 1")).is_err());
    }
}
