import init, { questionGraph, fusedMask, attentionWeights } from "./pkg/mgt_wasm.js";

const $ = (id) => document.getElementById(id);

function table(labels, cell) {
  const t = document.createElement("table");
  t.className = "grid";
  const head = t.insertRow();
  head.appendChild(document.createElement("th"));
  for (const l of labels) {
    const th = document.createElement("th");
    th.textContent = l;
    head.appendChild(th);
  }
  labels.forEach((l, i) => {
    const row = t.insertRow();
    const th = document.createElement("th");
    th.textContent = l;
    row.appendChild(th);
    labels.forEach((_, j) => cell(row.insertCell(), i, j));
  });
  return t;
}

function inputs() {
  return {
    q: $("question").value,
    side: Number($("side").value),
    conn: $("conn").value,
  };
}

function showGraph() {
  const { q } = inputs();
  const v = JSON.parse(questionGraph(q));
  const kinds = v.tokens.map((t) => `${t.surface}/${t.kind}`).join("  ");
  const edges = v.graph.edges.map((e) => `${e[0]}-${e[1]}${e[2] ? " " + e[2] : ""}`).join(", ");
  $("graph").textContent = `${kinds}\n\nedges: ${edges || "none"}`;
}

function showMask() {
  const { q, side, conn } = inputs();
  const v = JSON.parse(fusedMask(q, side, conn));
  $("mask-info").textContent = `L = ${v.labels.length}, blocked cells = ${v.blocked}`;
  $("mask").replaceChildren(table(v.labels, (td, i, j) => {
    td.style.background = v.open[i][j] ? "#cfe8cf" : "#444";
  }));
  $("focus").max = v.labels.length - 1;
}

function showAttention() {
  const { q, side, conn } = inputs();
  const lambda = Number($("lambda").value);
  const bias = Number($("bias").value);
  $("lambda-v").textContent = lambda.toFixed(1);
  $("bias-v").textContent = bias.toFixed(1);
  const v = JSON.parse(attentionWeights(q, side, conn, lambda, bias, Number($("focus").value), $("masked").checked));
  $("attn").replaceChildren(table(v.labels, (td, i, j) => {
    const w = v.weights[i][j];
    td.style.background = `rgba(30, 80, 200, ${Math.min(1, w * 2)})`;
    td.title = w.toFixed(4);
  }));
}

function refresh() {
  try {
    $("error").textContent = "";
    showGraph();
    showMask();
    showAttention();
  } catch (e) {
    $("error").textContent = String(e);
  }
}

await init();
for (const id of ["question", "side", "conn", "lambda", "bias", "focus", "masked"]) {
  $(id).addEventListener("input", refresh);
}
refresh();
