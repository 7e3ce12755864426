import init, { masked_softmax_explorer, compare_decoders, distance_stats } from "./pkg/taxocascade_demo.js";

const $ = (id) => document.getElementById(id);
const nums = (text) => text.split(",").map((s) => s.trim()).filter((s) => s !== "").map(Number);
const fmt = (x) => (x === null || x === undefined ? "n/a" : Number(x).toFixed(4));

function show(el, fn) {
  try {
    el.innerHTML = fn();
  } catch (e) {
    el.innerHTML = `<p class="bad">${e.message ?? e}</p>`;
  }
}

let mask = [];

function renderMask() {
  const n = nums($("sm-logits").value).length;
  while (mask.length < n) mask.push(true);
  mask.length = n;
  $("sm-mask").innerHTML = mask
    .map((m, i) => `<label><input type="checkbox" data-i="${i}" ${m ? "checked" : ""}> ${i}</label>`)
    .join("");
}

function softmax() {
  show($("sm-out"), () => {
    const logits = Float64Array.from(nums($("sm-logits").value));
    const r = JSON.parse(masked_softmax_explorer(logits, Uint8Array.from(mask, Number)));
    const rows = r.probs
      .map((p, i) => `<tr><td>${i}${i === r.argmax ? " *" : ""}</td><td>${fmt(p)}</td>` +
        `<td><span class="bar" style="width:${(p * 20).toFixed(2)}rem"></span></td></tr>`)
      .join("");
    return `<table><tr><th>entry</th><th>p</th><th></th></tr>${rows}</table><p>sum ${fmt(r.sum)}</p>`;
  });
}

function decoders() {
  show($("dc-out"), () => {
    const r = JSON.parse(compare_decoders(
      Number($("dc-seed").value), Number($("dc-classes").value), Number($("dc-sample").value),
      Number($("dc-sharp").value), Number($("dc-beam").value)));
    const rows = r.decoders
      .map((d) => {
        const cells = d.path.map((n, l) => `<td${n === r.truth[l] ? "" : ' class="bad"'}>${n ?? "-"}</td>`).join("");
        return `<tr><td>${d.strategy}</td>${cells}<td>${d.valid ? "yes" : '<span class="bad">no</span>'}</td><td>${fmt(d.score)}</td></tr>`;
      })
      .join("");
    const truth = r.truth.map((n) => `<td>${n}</td>`).join("");
    return `<p>Nodes per level: ${r.counts.join(" / ")}</p>` +
      `<table><tr><th>decoder</th><th>class</th><th>order</th><th>family</th><th>genus</th><th>species</th><th>valid</th><th>path prob</th></tr>` +
      `${rows}<tr><td>truth</td>${truth}<td></td><td></td></tr></table>` +
      `<details><summary>taxonomy</summary><pre>${r.taxonomy}</pre></details>`;
  });
}

function distances() {
  show($("ds-out"), () => {
    const counts = Uint32Array.from(nums($("ds-counts").value));
    const base = Uint32Array.from(nums($("ds-base").value));
    const r = JSON.parse(distance_stats(counts, base));
    const shares = r.error_shares ? r.error_shares.map((s, i) => `d=${i + 1}: ${fmt(s)}`).join(", ") : "n/a";
    return `<table>
      <tr><td>samples</td><td>${r.n}</td></tr>
      <tr><td>errors</td><td>${r.errors}</td></tr>
      <tr><td>mean distance, all</td><td>${fmt(r.mean_all)}</td></tr>
      <tr><td>mean distance, errors</td><td>${fmt(r.mean_errors)}</td></tr>
      <tr><td>std distance, errors</td><td>${fmt(r.std_errors)}</td></tr>
      <tr><td>error shares</td><td>${shares}</td></tr>
      <tr><td>severity reduction</td><td>${fmt(r.severity_reduction)}</td></tr>
    </table>`;
  });
}

await init();
$("status").textContent = "";
renderMask();
softmax();
decoders();
distances();

$("sm-logits").addEventListener("input", () => { renderMask(); softmax(); });
$("sm-mask").addEventListener("change", (e) => { mask[Number(e.target.dataset.i)] = e.target.checked; softmax(); });
for (const id of ["dc-seed", "dc-classes", "dc-sample", "dc-sharp", "dc-beam"]) $(id).addEventListener("input", decoders);
for (const id of ["ds-counts", "ds-base"]) $(id).addEventListener("input", distances);
