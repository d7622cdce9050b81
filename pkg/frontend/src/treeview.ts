// Read-only viewer for the metric formula trees. Authoring stays in config
// files; this panel only makes the deployed formulas inspectable.

import { clear, el } from "./dom.js";

export interface TreeNodeDoc {
  kind: string;
  name?: string;
  value?: number;
  op?: string;
  child?: TreeNodeDoc;
  left?: TreeNodeDoc;
  right?: TreeNodeDoc;
  cond?: { left: TreeNodeDoc; cmp: string; right: TreeNodeDoc };
  then?: TreeNodeDoc;
  else?: TreeNodeDoc;
  weight?: number;
  activation?: string | { clamp: [number, number] };
  tree?: string;
  args?: Record<string, TreeNodeDoc>;
}

export interface TreeDoc {
  name: string;
  inputs: string[];
  recursive?: boolean;
  root: TreeNodeDoc;
}

function activationLabel(activation: TreeNodeDoc["activation"]): string {
  if (!activation) return "";
  if (typeof activation === "string") {
    return activation === "logistic" ? " -> logistic" : "";
  }
  return ` -> clamp[${activation.clamp[0]}, ${activation.clamp[1]}]`;
}

/** Expression-style text for a node, e.g. `if (a + b) > c then (a * b) else c`. */
export function formatNode(node: TreeNodeDoc): string {
  switch (node.kind) {
    case "input":
      return node.name ?? "?";
    case "const":
      return String(node.value);
    case "unary":
      return `${node.op}(${formatNode(node.child!)})`;
    case "binary":
      return `(${formatNode(node.left!)} ${node.op} ${formatNode(node.right!)})`;
    case "if":
      return `if ${formatNode(node.cond!.left)} ${node.cond!.cmp} `
        + `${formatNode(node.cond!.right)} then ${formatNode(node.then!)} `
        + `else ${formatNode(node.else!)}`;
    case "weighted":
      return `${node.weight} * ${formatNode(node.child!)}`
        + activationLabel(node.activation);
    case "call": {
      const args = Object.entries(node.args ?? {})
        .map(([name, arg]) => `${name}=${formatNode(arg)}`)
        .join(", ");
      return `${node.tree}(${args})`;
    }
    case "return":
      return `return ${formatNode(node.child!)}`;
    default:
      return node.kind;
  }
}

export function renderTreeViewer(target: HTMLElement, trees: TreeDoc[]): void {
  clear(target);
  if (trees.length === 0) {
    target.append(el("p", { class: "empty" }, "no metric formulas configured"));
    return;
  }
  for (const tree of trees) {
    const summary = el("summary", {},
      el("code", {}, `${tree.name}(${tree.inputs.join(", ")})`),
      tree.recursive ? el("span", { class: "badge stale" }, "recursive") : "");
    const details = el("details", { class: "tree", "data-tree": tree.name },
      summary,
      el("pre", { class: "tree-body" }, formatNode(tree.root)));
    target.append(details);
  }
}
