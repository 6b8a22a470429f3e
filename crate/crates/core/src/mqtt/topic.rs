use super::MqttError;

/// A topic name: non-empty, no wildcards, no NUL.
pub fn validate_topic(topic: &str) -> Result<(), MqttError> {
    if topic.is_empty() || topic.len() > 65_535 || topic.contains(['+', '#', '\0']) {
        return Err(MqttError::InvalidTopic(topic.to_string()));
    }
    Ok(())
}

/// A topic filter: each level is literal, `+`, or `#` (last level only).
pub fn validate_filter(filter: &str) -> Result<(), MqttError> {
    let invalid = || MqttError::InvalidFilter(filter.to_string());
    if filter.is_empty() || filter.len() > 65_535 || filter.contains('\0') {
        return Err(invalid());
    }
    let mut levels = filter.split('/').peekable();
    while let Some(level) = levels.next() {
        match level {
            "#" if levels.peek().is_some() => return Err(invalid()),
            "#" | "+" => {}
            l if l.contains(['+', '#']) => return Err(invalid()),
            _ => {}
        }
    }
    Ok(())
}

/// Level-wise MQTT matching: `+` matches exactly one level, `#` all
/// remaining levels including none. Wildcards in the first level never
/// match `$`-prefixed topics.
pub fn topic_matches(filter: &str, topic: &str) -> Result<bool, MqttError> {
    validate_filter(filter)?;
    validate_topic(topic)?;
    if topic.starts_with('$') && (filter.starts_with('+') || filter.starts_with('#')) {
        return Ok(false);
    }
    let mut topic_levels = topic.split('/');
    for f in filter.split('/') {
        if f == "#" {
            return Ok(true);
        }
        match topic_levels.next() {
            Some(_) if f == "+" => {}
            Some(t) if t == f => {}
            _ => return Ok(false),
        }
    }
    Ok(topic_levels.next().is_none())
}
