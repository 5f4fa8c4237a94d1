use evf_core::encoder::Representation;
use evf_core::train::{AblationAxes, FreezeFlags, FusionChoice, ModuleState};

/// Parses `key=v1,v2;key=v3` or a JSON object into sweep axes.
pub fn parse_axes(s: &str) -> Result<AblationAxes, String> {
    let s = s.trim();
    if s.starts_with('{') {
        return serde_json::from_str(s).map_err(|e| format!("axes: {e}"));
    }
    let mut axes = AblationAxes::default();
    for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| format!("axes: expected key=values, got `{part}`"))?;
        let values = values.split(',').map(str::trim).filter(|v| !v.is_empty());
        match key.trim() {
            "fusion" => {
                for v in values {
                    axes.fusion
                        .push(FusionChoice::parse(v).ok_or_else(|| format!("axes: unknown fusion `{v}`"))?);
                }
            }
            "representation" => {
                for v in values {
                    axes.representation.push(parse_representation(v)?);
                }
            }
            "freeze" => {
                for v in values {
                    axes.freeze.push(parse_freeze(v)?);
                }
            }
            other => return Err(format!("axes: unknown axis `{other}`")),
        }
    }
    if axes == AblationAxes::default() {
        return Err("axes: no values given".into());
    }
    Ok(axes)
}

fn parse_representation(v: &str) -> Result<Representation, String> {
    serde_json::from_value(serde_json::Value::String(v.replace('-', "_")))
        .map_err(|_| format!("axes: unknown representation `{v}`"))
}

/// `T`/`F` for multimodal encoder, prompt encoder and mask decoder; the
/// image encoder stays frozen.
fn parse_freeze(v: &str) -> Result<FreezeFlags, String> {
    let states: Vec<ModuleState> = v
        .chars()
        .map(|c| match c {
            'T' | 't' => Ok(ModuleState::Trainable),
            'F' | 'f' => Ok(ModuleState::Frozen),
            _ => Err(format!("axes: freeze pattern `{v}` must use T and F")),
        })
        .collect::<Result<_, _>>()?;
    match states[..] {
        [m, p, d] => Ok(FreezeFlags {
            image_encoder: ModuleState::Frozen,
            multimodal_encoder: m,
            prompt_encoder: p,
            mask_decoder: d,
        }),
        _ => Err(format!("axes: freeze pattern `{v}` needs three letters")),
    }
}
