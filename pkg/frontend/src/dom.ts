// Small DOM helpers; no framework.

type Attrs = Record<string, string | number | boolean | ((e: Event) => void)>;

export function el(
  tag: string,
  attrs: Attrs = {},
  ...children: Array<string | Node>
): HTMLElement {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key.startsWith("on") && typeof value === "function") {
      node.addEventListener(key.slice(2).toLowerCase(), value as EventListener);
    } else if (key === "class") {
      node.className = String(value);
    } else {
      node.setAttribute(key, String(value));
    }
  }
  for (const child of children) {
    node.append(typeof child === "string" ? document.createTextNode(child) : child);
  }
  return node;
}

export function clear(node: Element): void {
  while (node.firstChild) node.removeChild(node.firstChild);
}

export function fmt(value: number, digits = 3): string {
  return value.toFixed(digits);
}
