from semask.cli import main

raise SystemExit(main())
