use serde_json::{json, Value};

use super::run::{create_dir, echo, load, load_split, write_json, LoadedCheckpoint};
use super::{AnalysisKind, AnalyzeArgs, CliError, CliResult};
use crate::analysis::{
    attention_map, dump_reconstructions, feature_variance, fourier_profile, hub_patches, loss_landscape, report,
    LandscapeSpec,
};
use crate::data::Split;
use crate::model::EncoderModel;
use crate::seed;

fn encoder_analysis<M: EncoderModel<f32>>(a: &AnalyzeArgs, model: &M, volumes: &[crate::data::VolumeGrid]) -> CliResult<Value> {
    let out = &a.out;
    Ok(match a.kind {
        AnalysisKind::Attention | AnalysisKind::Hubs => {
            if a.layer == 0 {
                return Err(CliError::Usage("--layer counts from 1".into()));
            }
            let map = attention_map(model, volumes, a.layer - 1)?;
            if a.kind == AnalysisKind::Attention {
                report::write_attention(&out.join("attention.csv"), &map)?;
                report::write_attention_mean(&out.join("attention_mean.csv"), &map)?;
                println!("wrote attention.csv and attention_mean.csv for layer {}", a.layer);
                json!({"layer": a.layer, "heads": map.heads.len()})
            } else {
                let hubs = hub_patches(map.head_average().view(), model.config().grid(), a.top_k)?;
                report::write_hubs(&out.join("hubs.csv"), &hubs)?;
                for h in &hubs.hubs {
                    println!("#{} patch {} at {:?}  column sum {:.4}", h.rank, h.patch, h.coords, h.score);
                }
                json!({"layer": a.layer, "hubs": hubs.hubs.iter().map(|h| h.patch).collect::<Vec<_>>()})
            }
        }
        AnalysisKind::Variance => {
            let v = feature_variance(model, volumes)?;
            report::write_variance(&out.join("variance.csv"), &v)?;
            for (l, x) in v.variances.iter().enumerate() {
                println!("block {:>2}  variance {x:.6}", l + 1);
            }
            json!({"variances": v.variances})
        }
        AnalysisKind::Fourier => {
            let p = fourier_profile(model, volumes)?;
            report::write_spectrum(&out.join("spectrum.csv"), &p)?;
            report::write_spectrum_delta(&out.join("spectrum_delta.csv"), &p)?;
            for (l, b) in p.blocks.iter().enumerate() {
                println!("block {:>2}  delta log amplitude {:.4}", l + 1, b.delta);
            }
            json!({"delta": p.blocks.iter().map(|b| b.delta).collect::<Vec<_>>()})
        }
        AnalysisKind::Landscape | AnalysisKind::Reconstruct => unreachable!("handled by the caller"),
    })
}

fn first_n<T: Clone>(v: &[T], n: usize) -> Vec<T> {
    v[..n.min(v.len())].to_vec()
}

pub fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    if a.max_samples == 0 {
        return Err(CliError::Usage("--max-samples must be positive".into()));
    }
    let ckpt: LoadedCheckpoint = load(&a.ckpt, &a.preset.config())?;
    create_dir(&a.out)?;
    let split = if a.kind == AnalysisKind::Landscape { Split::Train } else { a.split };
    let (volumes, labels, ids, hash) = load_split(&a.data, split)?;
    let summary = match a.kind {
        AnalysisKind::Landscape => {
            let model = ckpt.classifier()?;
            let spec = LandscapeSpec {
                steps: a.steps,
                range: a.range,
                seeds: [seed::derive(a.seed, &[0]), seed::derive(a.seed, &[1])],
                weight_decay: a.weight_decay,
            };
            let surface = loss_landscape(&model, &volumes, &labels, &spec)?;
            report::write_landscape(&a.out.join("landscape.csv"), &surface)?;
            let centre = surface.values[[a.steps / 2, a.steps / 2]];
            let (ba, bb, bl) = surface.argmin();
            println!("landscape {0}x{0}: centre loss {centre:.6}, minimum {bl:.6} at ({ba}, {bb})", a.steps);
            json!({"seeds": spec.seeds, "centre": centre, "min": bl})
        }
        AnalysisKind::Reconstruct => {
            let model = ckpt.pretrained()?;
            let n = a.max_samples;
            let dir = a.out.join("reconstructions");
            let recs = dump_reconstructions(&model, &first_n(&volumes, n), &first_n(&ids, n), a.mask_ratio, a.seed, &dir)?;
            report::write_reconstructions(&a.out.join("reconstructions.csv"), &recs)?;
            let mean = recs.iter().map(|r| r.masked_mse).sum::<f64>() / recs.len() as f64;
            println!("wrote {} reconstructions to {}, mean masked MSE {mean:.6}", recs.len(), dir.display());
            json!({"samples": recs.len(), "mean_masked_mse": mean})
        }
        _ => {
            let batch = first_n(&volumes, a.max_samples);
            if ckpt.is_classifier() {
                encoder_analysis(a, &ckpt.classifier()?, &batch)?
            } else {
                encoder_analysis(a, &ckpt.pretrained()?, &batch)?
            }
        }
    };
    let mut record = echo("analyze", a, summary, json!({"data_sha256": hash, "ckpt_sha256": ckpt.hash}))?;
    record["split"] = json!(split.as_str());
    write_json(&a.out.join(format!("analyze_{}.run.json", kind_name(a.kind))), &record)?;
    Ok(())
}

fn kind_name(kind: AnalysisKind) -> &'static str {
    match kind {
        AnalysisKind::Attention => "attention",
        AnalysisKind::Hubs => "hubs",
        AnalysisKind::Variance => "variance",
        AnalysisKind::Fourier => "fourier",
        AnalysisKind::Landscape => "landscape",
        AnalysisKind::Reconstruct => "reconstruct",
    }
}
